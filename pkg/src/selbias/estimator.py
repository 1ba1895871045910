"""Selection-bias (SB) rating estimator and the LS / popularity baselines.

The SB estimate jointly minimizes over item ratings ``theta`` and
log-selection scores ``beta``::

    f(theta, beta) = L1(theta) + L2(beta) + r * ||theta - a * beta||**2

    L1 = sum_k N_k * theta_k**2 / (2 sigma2) - S_k * theta_k / sigma2 + C
    L2 = n * logsumexp(beta) - sum_k N_k * beta_k

``L1`` is the Gaussian rating likelihood, ``L2`` the multinomial likelihood
of which items were selected, and the penalty ties each rating to the
popularity of its item. ``f`` is strictly convex for ``r > 0`` when every
``N_k > 0``. All vectors follow the ascending item order of ``ItemStats``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, DegenerateInputError, NumericalError
from .lbfgs import minimize_lbfgs
from .ratings import ItemStats


@dataclass(frozen=True)
class SBConfig:
    slope: float
    r: float
    sigma2: float | None = None  # None: use the variance stored in ItemStats
    tol: float = 1e-6
    max_iterations: int = 500
    memory_size: int = 10

    def __post_init__(self):
        if not self.slope > 0:
            raise ConfigError(f"slope must be > 0, got {self.slope}")
        if not self.r >= 0:
            raise ConfigError(f"r must be >= 0, got {self.r}")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be > 0, got {self.sigma2}")
        if not self.tol > 0 or self.max_iterations < 1 or self.memory_size < 1:
            raise ConfigError("tol, max_iterations and memory_size must be positive")

    def variance(self, stats: ItemStats) -> float:
        return stats.sigma2 if self.sigma2 is None else self.sigma2


@dataclass(frozen=True, eq=False)
class SBSolution:
    items: np.ndarray
    theta_vec: np.ndarray
    beta_vec: np.ndarray
    final_objective: float
    final_gradient_norm: float
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)

    @property
    def theta(self) -> dict:
        return {k.item(): float(v) for k, v in zip(self.items, self.theta_vec)}

    @property
    def beta(self) -> dict:
        return {k.item(): float(v) for k, v in zip(self.items, self.beta_vec)}

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_gradient_norm": self.final_gradient_norm,
            "final_objective": self.final_objective,
            "num_items": int(len(self.items)),
        }


def _check_stats(stats: ItemStats) -> None:
    if stats.num_items == 0:
        raise DegenerateInputError("statistics contain no items")
    if np.any(stats.counts <= 0):
        raise DegenerateInputError("all counts N_k must be strictly positive")


def _as_vector(values, stats: ItemStats, name: str) -> np.ndarray:
    if isinstance(values, dict):
        keys = set(values)
        expected = {k.item() for k in stats.items}
        if keys != expected:
            raise KeyError(f"{name} keys do not match the items of the statistics")
        return np.array([values[k.item()] for k in stats.items], dtype=float)
    vec = np.asarray(values, dtype=float)
    if vec.shape != (stats.num_items,):
        raise KeyError(f"{name} has shape {vec.shape}, expected ({stats.num_items},)")
    return vec


def _unpack(stats, theta, beta, config):
    _check_stats(stats)
    return _as_vector(theta, stats, "theta"), _as_vector(beta, stats, "beta"), config.variance(stats)


def objective(stats: ItemStats, theta, beta, config: SBConfig) -> float:
    """Value of the penalized negative log-likelihood, constant ``C`` included."""
    theta, beta, s2 = _unpack(stats, theta, beta, config)
    n, s = stats.counts, stats.sums
    l1 = np.sum(n * theta**2) / (2 * s2) - np.sum(s * theta) / s2 + stats.sum_squares / (2 * s2)
    l2 = stats.total_n * logsumexp(beta) - np.sum(n * beta)
    penalty = config.r * np.sum((theta - config.slope * beta) ** 2)
    return float(l1 + l2 + penalty)


def gradient(stats: ItemStats, theta, beta, config: SBConfig) -> np.ndarray:
    """Analytic gradient, laid out as ``[d/dtheta, d/dbeta]``."""
    theta, beta, s2 = _unpack(stats, theta, beta, config)
    return _gradient(stats, theta, beta, s2, config)


def _gradient(stats, theta, beta, s2, config):
    a, r = config.slope, config.r
    resid = theta - a * beta
    g_theta = (stats.counts * theta - stats.sums) / s2 + 2 * r * resid
    g_beta = stats.total_n * softmax(beta) - stats.counts - 2 * r * a * resid
    return np.concatenate([g_theta, g_beta])


def hessian(stats: ItemStats, theta, beta, config: SBConfig) -> np.ndarray:
    """Dense ``2K x 2K`` Hessian. Meant for tests and small ``K`` only."""
    theta, beta, s2 = _unpack(stats, theta, beta, config)
    a, r = config.slope, config.r
    k = stats.num_items
    lam = softmax(beta)
    h = np.zeros((2 * k, 2 * k))
    idx = np.arange(k)
    h[idx, idx] = stats.counts / s2 + 2 * r
    h[idx, idx + k] = -2 * r * a
    h[idx + k, idx] = -2 * r * a
    h[k:, k:] = -stats.total_n * np.outer(lam, lam)
    h[idx + k, idx + k] += stats.total_n * lam + 2 * r * a * a
    return h


def fit_ls(stats: ItemStats) -> dict:
    """Empirical means ``S_k / N_k``."""
    _check_stats(stats)
    return {k.item(): float(v) for k, v in zip(stats.items, stats.means)}


def popularity_ranking(stats: ItemStats) -> list:
    """Items by decreasing ``N_k``, ties by ascending item id."""
    order = np.lexsort((stats.items, -stats.counts))
    return [stats.items[i].item() for i in order]


def fit_sb(stats: ItemStats, config: SBConfig) -> SBSolution:
    """Minimize the SB objective with L-BFGS, starting from the LS / multinomial MLE point.

    At ``r = 0`` the starting point is already stationary and is returned as is.
    """
    _check_stats(stats)
    s2 = config.variance(stats)
    k = stats.num_items
    n, s = stats.counts, stats.sums
    a, r = config.slope, config.r
    # within-item scatter: the part of C that no choice of theta can remove
    l1_floor = (stats.sum_squares - np.sum(s * s / n)) / (2 * s2)

    def fun(z):
        theta, beta = z[:k], z[k:]
        lse = logsumexp(beta)
        if not math.isfinite(lse):
            raise NumericalError("log-sum-exp overflow in SB objective")
        value = (
            np.sum(n * (theta - s / n) ** 2) / (2 * s2)
            + stats.total_n * lse
            - np.dot(n, beta)
            + r * np.sum((theta - a * beta) ** 2)
        )
        return value, _gradient(stats, theta, beta, s2, config)

    z0 = np.concatenate([s / n, np.log(n / stats.total_n)])
    res = minimize_lbfgs(fun, z0, tol=config.tol, max_iterations=config.max_iterations,
                         memory=config.memory_size)
    z, iterations = res.x, res.iterations
    trace = [v + l1_floor for v in res.trace]

    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite SB solution")
    value, grad = fun(z)
    gnorm = float(np.max(np.abs(grad)))
    return SBSolution(
        items=stats.items,
        theta_vec=z[:k].copy(),
        beta_vec=z[k:].copy(),
        final_objective=float(value + l1_floor),
        final_gradient_norm=gnorm,
        iterations=iterations,
        converged=gnorm <= config.tol,
        objective_trace=trace,
    )


def write_solution(solution: SBSolution, csv_path, json_path=None, extra: dict | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "theta"])
        for item, value in zip(solution.items, solution.theta_vec):
            writer.writerow([item.item(), repr(float(value))])
    if json_path is not None:
        payload = solution.diagnostics()
        if extra:
            payload.update(extra)
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
