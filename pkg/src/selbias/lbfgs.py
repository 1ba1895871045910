"""Limited-memory BFGS for smooth unconstrained minimization.

The line search enforces the weak Wolfe conditions, with the sufficient
decrease test relaxed to the approximate form of Hager and Zhang once
function differences drop to round-off level. That keeps the iteration
going down to absolute gradient tolerances far below what a plain Armijo
test on objective values of size ~1e4 can resolve.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

C1 = 1e-4
C2 = 0.9
F_NOISE = 1e-10
MAX_LINE_SEARCH = 60


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def _line_search(fun, x, f0, g0, d, step):
    dphi0 = float(np.dot(g0, d))
    eps = F_NOISE * (abs(f0) + 1.0)
    lo, hi = 0.0, np.inf
    for _ in range(MAX_LINE_SEARCH):
        x_new = x + step * d
        f_new, g_new = fun(x_new)
        dphi = float(np.dot(g_new, d))
        armijo = f_new <= f0 + C1 * step * dphi0
        approx = f_new <= f0 + eps and dphi <= (2 * C1 - 1) * dphi0
        if not np.isfinite(f_new) or not (armijo or approx):
            hi = step
        elif dphi < C2 * dphi0:
            lo = step
        else:
            return step, x_new, f_new, g_new
        step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * step
    return None


def minimize_lbfgs(fun, x0, tol=1e-6, max_iterations=500, memory=10) -> LbfgsResult:
    """Minimize ``fun`` where ``fun(x)`` returns ``(value, gradient)``.

    Stops when the gradient infinity norm is ``<= tol``.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    trace = [float(f)]
    s_hist, y_hist, rho_hist = deque(maxlen=memory), deque(maxlen=memory), deque(maxlen=memory)
    message = "maximum number of iterations reached"
    it = 0
    while True:
        if np.max(np.abs(g), initial=0.0) <= tol:
            message = "gradient tolerance reached"
            break
        if it >= max_iterations:
            break
        if s_hist:
            d = -_two_loop(g, s_hist, y_hist, rho_hist)
            step = 1.0
        else:
            d = -g
            step = 1.0 / max(1.0, float(np.linalg.norm(g)))
        if np.dot(g, d) >= 0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            step = 1.0 / max(1.0, float(np.linalg.norm(g)))
        found = _line_search(fun, x, f, g, d, step)
        if found is None and s_hist:
            # stale curvature pairs: retry once along steepest descent
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            found = _line_search(fun, x, f, g, d, 1.0 / max(1.0, float(np.linalg.norm(g))))
        if found is None:
            message = "line search failed"
            break
        step, x_new, f_new, g_new = found
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s); y_hist.append(y); rho_hist.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
        it += 1
        trace.append(float(f))
    converged = bool(np.max(np.abs(g), initial=0.0) <= tol)
    return LbfgsResult(x, float(f), g, it, converged, message, trace)
