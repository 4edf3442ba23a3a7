"""Nonlinear conjugate gradient with a projected strong-Wolfe line search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class CGResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)
    nit: int = 0
    converged: bool = False
    message: str = ""


def _bounds(lower, upper, n):
    lo = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,)).copy()
    hi = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,)).copy()
    return lo, hi


def _projected_gradient(x, g, lo, hi):
    gp = g.copy()
    gp[(x <= lo) & (g > 0)] = 0.0
    gp[(x >= hi) & (g < 0)] = 0.0
    return gp


def _cubic_min(a0, f0, d0, a1, f1, d1):
    """Minimizer of the cubic interpolating values and slopes at a0, a1."""
    d1_ = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1)
    disc = d1_ * d1_ - d0 * d1
    if disc < 0:
        return None
    d2 = np.sign(a1 - a0) * np.sqrt(disc)
    denom = d1 - d0 + 2.0 * d2
    if denom == 0:
        return None
    return a1 - (a1 - a0) * (d1 + d2 - d1_) / denom


def _line_search(fun, x, f, g, d, step, lo, hi, c1, c2, max_eval):
    """Projected line search: strong Wolfe bracketing and zoom.

    Every returned point satisfies the Armijo condition; when the curvature
    condition cannot be met within ``max_eval`` evaluations the best Armijo
    point seen is returned. Returns (x, f, g, step, clipped) or None.
    """
    slope = g @ d
    best = None
    evals = 0

    def trial(a):
        nonlocal best, evals
        evals += 1
        xt = np.clip(x + a * d, lo, hi)
        clipped = not np.array_equal(xt, x + a * d)
        ft, gt = fun(xt)
        ft = float(ft)
        gt = np.asarray(gt, float).ravel()
        finite = np.isfinite(ft) and np.all(np.isfinite(gt))
        ok = finite and ft <= f + c1 * (g @ (xt - x)) and ft < f
        if ok and (best is None or ft < best[1]):
            best = (xt, ft, gt, a, clipped)
        return ft, (gt @ d if finite else np.nan), clipped, ok, finite

    def zoom(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi):
        while evals < max_eval:
            width = a_hi - a_lo
            a = None
            if np.isfinite(f_hi) and np.isfinite(s_hi):
                a = _cubic_min(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi)
            if a is None or not np.isfinite(a) or not (
                    min(a_lo, a_hi) + 0.1 * abs(width) <= a <= max(a_lo, a_hi) - 0.1 * abs(width)):
                a = a_lo + 0.5 * width
            ft, st, clipped, ok, finite = trial(a)
            if not ok or ft >= f_lo:
                a_hi, f_hi, s_hi = a, ft, st
            else:
                if clipped or abs(st) <= -c2 * slope:
                    return
                if st * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, s_hi = a_lo, f_lo, s_lo
                a_lo, f_lo, s_lo = a, ft, st
            if abs(a_hi - a_lo) <= 1e-10 * max(abs(a_lo), abs(a_hi)):
                return

    a_prev, f_prev, s_prev = 0.0, f, slope
    a = step
    while evals < max_eval:
        ft, st, clipped, ok, finite = trial(a)
        if not finite:
            a = a_prev + 0.25 * (a - a_prev)
            continue
        if clipped:
            if ok:
                break
            a = a_prev + 0.5 * (a - a_prev)
            continue
        if not ok or (a_prev > 0 and ft >= f_prev):
            zoom(a_prev, f_prev, s_prev, a, ft, st)
            break
        if abs(st) <= -c2 * slope:
            break
        if st >= 0:
            zoom(a, ft, st, a_prev, f_prev, s_prev)
            break
        a_prev, f_prev, s_prev = a, ft, st
        a = 2.0 * a
    return best


def minimize_cg(fun, x0, lower=None, upper=None, max_iter=100, grad_tol=1e-6, abs_grad_tol=0.0,
                ftol=1e-13, c1=1e-4, c2=0.1, max_eval=40, step0=None):
    """Minimize ``fun(x) -> (value, gradient)`` with Polak-Ribiere+ CG.

    Stops when the infinity norm of the projected gradient drops below
    ``max(grad_tol * initial norm, abs_grad_tol)`` or when an accepted step
    changes the value by less than ``ftol`` relative. Bounds are enforced by
    projection; a step that hits a bound restarts the direction from steepest
    descent. The value trace is nonincreasing by construction.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    lo, hi = _bounds(lower, upper, x.size)
    x = np.clip(x, lo, hi)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, float).ravel()
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("objective is not finite at the starting point")
    trace = [f]
    gp = _projected_gradient(x, g, lo, hi)
    gnorm0 = np.max(np.abs(gp)) if gp.size else 0.0
    if gnorm0 == 0.0:
        return CGResult(x, f, trace, 0, True, "stationary start")
    tol = max(grad_tol * gnorm0, abs_grad_tol)
    if gnorm0 <= tol:
        return CGResult(x, f, trace, 0, True, "gradient tolerance reached")
    d = -gp
    step = (1.0 / gnorm0) if step0 is None else step0
    prev_slope = None
    it = 0
    while it < max_iter:
        if np.max(np.abs(gp)) <= tol:
            return CGResult(x, f, trace, it, True, "gradient tolerance reached")
        d[(x <= lo) & (d < 0)] = 0.0
        d[(x >= hi) & (d > 0)] = 0.0
        slope = g @ d
        if slope >= 0 or not np.any(d):
            d = -gp
            slope = g @ d
        if prev_slope is not None:
            step = min(step * prev_slope / slope, 1e3 * step) if slope < 0 else step
        res = _line_search(fun, x, f, g, d, step, lo, hi, c1, c2, max_eval)
        if res is None and not np.array_equal(d, -gp):
            d = -gp
            slope = g @ d
            res = _line_search(fun, x, f, g, d, 1.0 / max(np.max(np.abs(gp)), 1e-300), lo, hi,
                               c1, c2, max(max_eval // 4, 5))
        if res is None:
            return CGResult(x, f, trace, it, False, "line search failed to decrease the objective")
        x_new, f_new, g_new, step, clipped = res
        g_new = g_new.ravel()
        gp_new = _projected_gradient(x_new, g_new, lo, hi)
        it += 1
        trace.append(f_new)
        if clipped:
            beta = 0.0
        else:
            beta = max(0.0, gp_new @ (gp_new - gp) / max(gp @ gp, 1e-300))
        d = -gp_new + beta * d
        prev_slope = slope
        small_change = f - f_new <= ftol * max(1.0, abs(f_new))
        x, f, g, gp = x_new, f_new, g_new, gp_new
        if small_change:
            return CGResult(x, f, trace, it, True, "relative change below ftol")
    converged = np.max(np.abs(gp)) <= tol
    return CGResult(x, f, trace, it, converged, "maximum iterations reached")
