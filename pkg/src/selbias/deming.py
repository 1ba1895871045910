"""Weighted total least squares (Deming) fit of the popularity/rating line.

Each item contributes a point ``(x, y) = (ln(N_k / n), S_k / N_k)`` whose
coordinates are both noisy, with variances ``vx = 1/N_k`` and
``vy = sigma2/N_k``. The fitted line ``y = a*x + b`` minimizes

    sum_k (x_k - xh_k)**2 / vx_k + (y_k - yh_k)**2 / vy_k

where ``(xh_k, yh_k)`` is the closest point of the line to ``(x_k, y_k)`` in
the metric given by the weights. For a fixed line that inner minimum is
``(y - a*x - b)**2 / (vy + a**2 * vx)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateInputError, VerticalLineError
from .ratings import ItemStats, as_table, sufficient_stats

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
N_BRACKETS = 16
ANGLE_TOL = 1e-10


@dataclass(frozen=True)
class TlsPoint:
    x: float
    y: float
    vx: float
    vy: float

    def __post_init__(self):
        if not (self.vx > 0 and self.vy > 0):
            raise ValueError("point variances must be strictly positive")


@dataclass(frozen=True)
class BiasLine:
    slope: float
    intercept: float
    objective: float
    angle: float

    def predict(self, x):
        return self.slope * np.asarray(x) + self.intercept


def tls_points(stats: ItemStats) -> list[TlsPoint]:
    if stats.num_items == 0:
        raise DegenerateInputError("no items in statistics")
    x = np.log(stats.counts / stats.total_n)
    y = stats.means
    return [
        TlsPoint(float(xi), float(yi), float(1.0 / n), float(stats.sigma2 / n))
        for xi, yi, n in zip(x, y, stats.counts)
    ]


def _columns(points):
    arr = np.array([(p.x, p.y, p.vx, p.vy) for p in points], dtype=float).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def tls_objective(points, slope: float, intercept: float) -> float:
    x, y, vx, vy = _columns(points)
    resid = y - slope * x - intercept
    return float(np.sum(resid**2 / (vy + slope**2 * vx)))


class _AngleProfile:
    """Objective profiled over the offset, as a function of the line angle."""

    def __init__(self, x, y, vx, vy):
        self.x, self.y, self.vx, self.vy = x, y, vx, vy

    def offset(self, phi):
        c, s = math.cos(phi), math.sin(phi)
        u = self.y * c - self.x * s
        wts = 1.0 / (self.vy * c * c + self.vx * s * s)
        return u, wts, float(np.sum(wts * u) / np.sum(wts))

    def __call__(self, phi):
        u, wts, d = self.offset(phi)
        return float(np.sum(wts * (u - d) ** 2))

    def derivative(self, phi):
        # the offset is optimal, so its own variation drops out
        c, s = math.cos(phi), math.sin(phi)
        u, wts, d = self.offset(phi)
        e = u - d
        du = -self.y * s - self.x * c
        dwts = -2.0 * s * c * (self.vx - self.vy) * wts * wts
        return float(np.sum(dwts * e * e) + 2.0 * np.sum(wts * e * du))


def _golden_section(f, lo, hi, tol=ANGLE_TOL):
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    # the interval ends are candidates too: the minimum may sit on a bracket edge
    best = min((f1, x1), (f2, x2), (f(lo), lo), (f(hi), hi))
    return best[1], best[0]


def _polish(profile, phi, width):
    """Root of the profile derivative near ``phi``.

    Comparing objective values resolves the angle only to about the square
    root of machine precision; the derivative sign resolves it fully.
    """
    lo, hi = max(phi - width, -math.pi / 2), min(phi + width, math.pi / 2)
    dlo, dhi = profile.derivative(lo), profile.derivative(hi)
    if not (dlo < 0 < dhi):
        return phi
    root = brentq(profile.derivative, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return root if profile(root) <= profile(phi) * (1 + 1e-12) else phi


def fit_weighted_tls(points) -> BiasLine:
    """Global minimizer of the weighted TLS criterion over all non-vertical lines.

    The line is parametrized by its angle ``phi``; for each angle the optimal
    offset is closed form, and the remaining 1-D problem is solved by
    golden-section search on 16 equal sub-brackets of ``[-pi/2, pi/2]``.
    """
    points = list(points)
    if len(points) < 2:
        raise DegenerateInputError("weighted TLS needs at least two points")
    x, y, vx, vy = _columns(points)
    x_const = np.ptp(x) == 0
    y_const = np.ptp(y) == 0
    if x_const and y_const:
        raise DegenerateInputError("all points coincide; the line is undetermined")
    if x_const:
        raise VerticalLineError("all x values are identical; the optimum is a vertical line")

    profile = _AngleProfile(x, y, vx, vy)
    edges = np.linspace(-math.pi / 2, math.pi / 2, N_BRACKETS + 1)
    best_phi, best_val = None, math.inf
    for lo, hi in zip(edges[:-1], edges[1:]):
        phi, val = _golden_section(profile, float(lo), float(hi))
        if val < best_val:
            best_phi, best_val = phi, val

    best_phi = _polish(profile, best_phi, 1e-6)
    cos_phi = math.cos(best_phi)
    if abs(cos_phi) < 1e-8:
        raise VerticalLineError("the weighted TLS optimum is a vertical line")
    _, _, offset = profile.offset(best_phi)
    slope = math.tan(best_phi)
    intercept = offset / cos_phi
    return BiasLine(slope, intercept, tls_objective(points, slope, intercept), best_phi)


def fit_bias_line(events) -> BiasLine:
    """Statistics, points and TLS fit in one call."""
    return fit_weighted_tls(tls_points(sufficient_stats(events)))


@dataclass
class SubsetSlopes:
    slopes: list
    skipped: int = 0

    def median(self) -> float:
        if not self.slopes:
            return math.nan
        return float(np.median(self.slopes))


def subset_slopes(events, subset_user_count: int, num_subsets: int, seed: int) -> SubsetSlopes:
    """Slopes fitted on random sub-populations of ``subset_user_count`` users.

    Subset ``j`` draws its users with the generator seeded by ``(seed, j)``,
    so any subset can be reproduced on its own. Subsets on which the fit is
    undefined (fewer than two items, degenerate geometry) are counted in
    ``skipped``.
    """
    table = as_table(events)
    users, user_idx = np.unique(table.users, return_inverse=True)
    if num_subsets > 0 and len(users) < subset_user_count:
        raise DegenerateInputError(
            f"dataset has {len(users)} users, fewer than the subset size {subset_user_count}"
        )
    order = np.argsort(user_idx, kind="stable")
    bounds = np.concatenate(([0], np.cumsum(np.bincount(user_idx, minlength=len(users)))))

    result = SubsetSlopes([])
    for j in range(num_subsets):
        rng = np.random.default_rng([seed, j])
        chosen = np.sort(rng.choice(len(users), size=subset_user_count, replace=False))
        rows = np.concatenate([order[bounds[u]:bounds[u + 1]] for u in chosen])
        sub = table.take(np.sort(rows))
        try:
            line = fit_bias_line(sub)
        except DegenerateInputError:
            result.skipped += 1
            continue
        result.slopes.append(line.slope)
    return result


def write_slopes_csv(path, slopes, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["slope"])
        for s in slopes:
            writer.writerow([repr(float(s))])
