"""Deterministic first-order minimisers used by all model fits."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

log = logging.getLogger(__name__)

__all__ = ["OptimResult", "minimize"]


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)

    @property
    def grad_norm(self):
        return float(np.linalg.norm(self.grad))


class _Cached:
    """Evaluate ``fg`` once per point; failures count as ``+inf``."""

    def __init__(self, fg):
        self.fg = fg
        self.key = None
        self.val = (np.inf, None)

    def __call__(self, x):
        key = x.tobytes()
        if key != self.key:
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    f, g = self.fg(x)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError, OverflowError):
                f, g = np.inf, None
            if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
                f, g = np.inf, None
            self.key, self.val = key, (float(f), g)
        return self.val

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        g = self(x)[1]
        return np.full(x.shape, np.nan) if g is None else g


def _wolfe(ev, x, d, f, g, f_prev, c1, c2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            t, *_ = line_search(ev.f, ev.g, x, d, gfk=g, old_fval=f, old_old_fval=f_prev,
                                c1=c1, c2=c2, maxiter=20)
    if t is None or not np.isfinite(t) or t <= 0:
        return None
    f_new, g_new = ev(x + t * d)
    if g_new is None or f_new > f + c1 * t * float(g @ d):
        return None
    return t, f_new, g_new


def _backtrack(ev, x, d, f, slope, t, c1, max_backtracks):
    for _ in range(max_backtracks):
        f_new, g_new = ev(x + t * d)
        if g_new is not None and f_new <= f + c1 * t * slope:
            return t, f_new, g_new
        t *= 0.5
    return None


def minimize(fg, x0, method="cg", max_iters=500, rel_tol=1e-6, c1=1e-4, c2=None,
             restart_every=None, max_backtracks=60, callback=None):
    """Minimise ``fg(x) -> (f, grad)``.

    ``method="cg"`` is Polak-Ribiere+ nonlinear conjugate gradients,
    restarted along steepest descent every ``restart_every`` iterations
    (default: problem dimension) or whenever the direction fails to
    descend.  ``method="gd"`` is steepest descent.  Steps come from a
    strong-Wolfe line search with Armijo backtracking as fallback, so every
    accepted step lowers the objective.

    Converged means ``||grad|| < rel_tol * (1 + |f|)``.
    """
    if method not in ("cg", "gd"):
        raise ValueError(f"unknown optimizer {method!r}")
    c2 = (0.4 if method == "cg" else 0.9) if c2 is None else c2
    ev = _Cached(fg)
    x = np.array(x0, dtype=float)
    f, g = ev(x)
    if g is None:
        raise FloatingPointError("objective is not finite at the initial point")
    trace = [f]
    restart_every = restart_every or max(x.size, 1)
    d = -g
    f_prev = f + 0.5 * float(np.linalg.norm(g))
    since_restart = 0
    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) < rel_tol * (1.0 + abs(f)):
            message = "gradient tolerance reached"
            it -= 1
            break
        if method == "gd" or float(g @ d) >= 0:
            d = -g
            since_restart = 0
        step = _wolfe(ev, x, d, f, g, f_prev, c1, c2)
        if step is None:
            slope = float(g @ d)
            t0 = min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300)) if since_restart == 0 else 1.0
            step = _backtrack(ev, x, d, f, slope, t0, c1, max_backtracks)
        if step is None and since_restart > 0:
            d = -g
            since_restart = 0
            step = _wolfe(ev, x, d, f, g, f_prev, c1, c2) or _backtrack(
                ev, x, d, f, -float(g @ g), min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300)), c1, max_backtracks)
        if step is None:
            message = "line search failed"
            it -= 1
            break
        t, f_new, g_new = step
        x = x + t * d
        if method == "cg":
            beta = max(0.0, float(g_new @ (g_new - g)) / max(float(g @ g), 1e-300))
            since_restart += 1
            if since_restart >= restart_every:
                beta, since_restart = 0.0, 0
            d = -g_new + beta * d
        else:
            d = -g_new
        f_prev, f, g = f, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(it, x, f)
    converged = bool(np.linalg.norm(g) < rel_tol * (1.0 + abs(f)))
    log.debug("optimizer stopped after %d iterations: %s (f=%.6g)", it, message, f)
    return OptimResult(x=x, fun=float(f), grad=g, n_iter=it, converged=converged,
                       message=message, trace=trace)
