"""Deterministic quasi-Newton minimizer (BFGS with strong Wolfe line search).

Shared by policy search and GP hyperparameter training.  The
implementation is plain numpy and fully deterministic: identical inputs
produce identical iterate traces.  For very large parameter vectors
(> 1000) it switches to the limited-memory two-loop recursion.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError

_C1 = 1e-4  # sufficient decrease
_C2 = 0.9  # default curvature
_LBFGS_THRESHOLD = 1000
_LBFGS_MEMORY = 30


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    value: float
    grad_norm: float
    n_evals: int


@dataclass
class MinimizeResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    trace: list[TraceEntry] = field(default_factory=list)
    converged: bool = False
    warning: str | None = None
    n_evals: int = 0


def trace_csv(result: MinimizeResult) -> str:
    """Render the accepted-iterate trace as CSV (iteration, f, grad_norm, evals)."""
    buf = io.StringIO()
    buf.write("iteration,f,grad_norm,evals\n")
    for t in result.trace:
        buf.write(f"{t.iteration},{t.value!r},{t.grad_norm!r},{t.n_evals}\n")
    return buf.getvalue()


class _Counter:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, x):
        self.n += 1
        v, g = self.f(x)
        v = float(v)
        g = np.asarray(g, dtype=float)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return np.inf, g
        return v, g


def _line_search(fc, x, p, f0, g0, max_evals, c2=_C2):
    """Strong Wolfe line search (bracket + zoom with bisection safeguard).

    Returns (alpha, f, g, x_new) or None if no acceptable step was found
    within the evaluation budget.  Non-finite trial values are treated as
    +inf, so the search backtracks away from cliffs.
    """
    d0 = float(np.dot(g0, p))
    if d0 >= 0:
        return None

    def phi(alpha):
        xn = x + alpha * p
        v, g = fc(xn)
        return v, g, xn

    alpha_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = 1.0
    lo = hi = None
    evals = 0
    # bracketing
    while evals < max_evals:
        f_a, g_a, x_a = phi(alpha)
        evals += 1
        d_a = float(np.dot(g_a, p)) if np.isfinite(f_a) else np.inf
        if (not np.isfinite(f_a)) or f_a > f0 + _C1 * alpha * d0 or (evals > 1 and f_a >= f_prev):
            lo, f_lo, d_lo = alpha_prev, f_prev, d_prev
            hi, f_hi = alpha, f_a
            break
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a, g_a, x_a
        if d_a >= 0:
            lo, f_lo, d_lo = alpha, f_a, d_a
            hi, f_hi = alpha_prev, f_prev
            break
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = 2.0 * alpha
    else:
        return None

    # zoom
    while evals < max_evals:
        if np.isfinite(f_hi):
            # quadratic interpolation between lo and hi, safeguarded
            denom = 2.0 * (f_hi - f_lo - d_lo * (hi - lo))
            alpha = lo + (-d_lo * (hi - lo) ** 2 / denom if abs(denom) > 1e-300 else 0.5 * (hi - lo))
            span = abs(hi - lo)
            low, high = min(lo, hi), max(lo, hi)
            if not (low + 0.1 * span <= alpha <= high - 0.1 * span):
                alpha = 0.5 * (lo + hi)
        else:
            alpha = 0.5 * (lo + hi)
        f_a, g_a, x_a = phi(alpha)
        evals += 1
        if (not np.isfinite(f_a)) or f_a > f0 + _C1 * alpha * d0 or f_a >= f_lo:
            hi, f_hi = alpha, f_a
        else:
            d_a = float(np.dot(g_a, p))
            if abs(d_a) <= -c2 * d0:
                return alpha, f_a, g_a, x_a
            if d_a * (hi - lo) >= 0:
                hi, f_hi = lo, f_lo
            lo, f_lo, d_lo = alpha, f_a, d_a
        if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
            break
    return None


def minimize(
    f,
    theta0,
    *,
    max_iters: int = 150,
    grad_tol: float = 1e-5,
    max_line_search_evals: int = 20,
    curvature: float = _C2,
) -> MinimizeResult:
    """Minimize f: theta -> (value, gradient) from theta0.

    Accepted iterates satisfy the strong Wolfe conditions, so trace
    values are strictly decreasing.  Terminates when the gradient norm
    drops below grad_tol * max(1, |f|) or at the iteration cap.  On a
    line-search failure (including NaN cliffs) the best iterate found so
    far is returned with a warning flag.
    """
    x = np.array(theta0, dtype=float).ravel()
    fc = _Counter(f)
    v, g = fc(x)
    if not np.isfinite(v):
        raise OptimizerError("objective not finite at the starting point", theta=x)

    n = x.size
    limited = n > _LBFGS_THRESHOLD
    h = np.eye(n) if not limited else None
    mem_s: list[np.ndarray] = []
    mem_y: list[np.ndarray] = []
    first_update = True

    result = MinimizeResult(theta=x.copy(), value=v, grad=g.copy())
    result.trace.append(TraceEntry(0, v, float(np.linalg.norm(g)), fc.n))

    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol * max(1.0, abs(v)):
            result.converged = True
            break

        if limited:
            p = _two_loop(g, mem_s, mem_y)
        else:
            p = -(h @ g)
        if np.dot(p, g) >= 0:  # safeguard: fall back to steepest descent
            p = -g

        scale = 1.0 if it > 1 else min(1.0, 1.0 / max(gnorm, 1e-12))
        ls = _line_search(fc, x, scale * p, v, g, max_line_search_evals, curvature)
        if ls is None and not np.array_equal(p, -g):
            # curvature model went stale; restart from steepest descent
            if limited:
                mem_s.clear()
                mem_y.clear()
            else:
                h = np.eye(n)
                first_update = True
            ls = _line_search(fc, x, -g / max(gnorm, 1e-12), v, g, max_line_search_evals, curvature)
        if ls is None:
            result.warning = "line-search failure; best iterate returned"
            break
        alpha, v_new, g_new, x_new = ls

        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            if limited:
                mem_s.append(s)
                mem_y.append(y)
                if len(mem_s) > _LBFGS_MEMORY:
                    mem_s.pop(0)
                    mem_y.pop(0)
            else:
                if first_update:
                    h *= sy / float(np.dot(y, y))
                    first_update = False
                rho = 1.0 / sy
                hy = h @ y
                h -= rho * (np.outer(s, hy) + np.outer(hy, s))
                h += (rho * rho * float(np.dot(y, hy)) + rho) * np.outer(s, s)

        x, v, g = x_new, v_new, g_new
        result.theta, result.value, result.grad = x.copy(), v, g.copy()
        result.trace.append(TraceEntry(it, v, float(np.linalg.norm(g)), fc.n))
    else:
        result.converged = float(np.linalg.norm(g)) <= grad_tol * max(1.0, abs(v))

    result.n_evals = fc.n
    return result


def _two_loop(g, mem_s, mem_y):
    """L-BFGS two-loop recursion for the search direction."""
    q = -g.copy()
    if not mem_s:
        return q
    alphas = []
    rhos = [1.0 / float(np.dot(s, y)) for s, y in zip(mem_s, mem_y)]
    for s, y, rho in zip(reversed(mem_s), reversed(mem_y), reversed(rhos)):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    gamma = float(np.dot(mem_s[-1], mem_y[-1])) / float(np.dot(mem_y[-1], mem_y[-1]))
    q *= gamma
    for (s, y, rho), a in zip(zip(mem_s, mem_y, rhos), reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return q
