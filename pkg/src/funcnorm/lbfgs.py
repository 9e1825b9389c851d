"""Limited-memory BFGS with an Armijo backtracking line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool


def two_loop_direction(g: np.ndarray, pairs, precondition=None) -> np.ndarray:
    """Apply the inverse-Hessian approximation to ``g`` and negate it.

    ``precondition`` (a symmetric positive definite linear map) replaces the
    identity as the initial inverse Hessian, still scaled by ``s.y / y.P.y``.
    """
    P = precondition if precondition is not None else (lambda v: v)
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q = P(q) * ((s @ y) / (y @ P(y)))
    else:
        q = P(q)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def backtracking(fun, x, f, g, d, step=1.0, c1=1e-4, shrink=0.5, max_halvings=60):
    """Largest ``step * shrink^k`` meeting the Armijo condition."""
    slope = g @ d
    for _ in range(max_halvings):
        x_new = x + step * d
        f_new, g_new = fun(x_new)
        if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
            return step, x_new, f_new, g_new
        step *= shrink
    return None


def minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray, tol: float = 1e-6,
             max_iter: int = 5000, memory: int = 10, raise_on_failure: bool = True,
             precondition: Callable[[np.ndarray], np.ndarray] | None = None) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) until ``max|grad| <= tol``.

    The stopping test always uses the raw gradient, preconditioned or not.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    pairs: deque = deque(maxlen=memory)
    it = 0
    for it in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            return LbfgsResult(x, f, g, it, True)
        d = two_loop_direction(g, list(pairs), precondition)
        if g @ d >= 0:  # not a descent direction; restart from the initial metric
            pairs.clear()
            d = two_loop_direction(g, [], precondition)
        first = 1.0 if pairs else min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-12))
        found = backtracking(fun, x, f, g, d, step=first)
        if found is None:
            if pairs:
                pairs.clear()
                continue
            break
        _, x_new, f_new, g_new = found
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
    converged = bool(np.max(np.abs(g)) <= tol)
    if not converged and raise_on_failure:
        raise ConvergenceError(f"L-BFGS stopped with max|grad| = {np.max(np.abs(g)):.3e} > {tol:g}")
    return LbfgsResult(x, f, g, it + 1, converged)
