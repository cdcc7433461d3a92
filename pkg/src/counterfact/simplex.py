"""
Quadratic programs over the probability simplex.

Solves ``min_w 0.5 w'Hw - g'w`` subject to ``w >= 0, sum(w) = 1`` with a
primal active-set method started from the uniform point. When the active set
stalls (possible for rank-deficient ``H``) the solver finishes with an
accelerated projected-gradient loop whose support seeds a final exact
active-set polish. Optimality is certified with the
Frank-Wolfe duality gap, which bounds ``f(w) - f*`` from above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from counterfact.errors import ConvergenceError


@dataclass
class QPResult:
    w: np.ndarray
    objective: float
    gap: float
    iterations: int
    method: str


def project_simplex(c: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``c`` onto the probability simplex."""
    c = np.asarray(c, dtype=float)
    u = np.sort(c)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(c) + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    return np.maximum(c - css[rho] / (rho + 1), 0.0)


def _objective(H, g, w):
    return 0.5 * w @ H @ w - g @ w


def _fw_gap(H, g, w):
    grad = H @ w - g
    return float(grad @ w - grad.min())


def _active_set(H, g, w, free, max_iter, eps_mult=None):
    n = len(g)
    it = 0
    eps_step = 1e-13
    # multipliers below this are treated as zero
    if eps_mult is None:
        eps_mult = 1e-12 * (1.0 + np.abs(g).max() + np.abs(H).max())
    last_freed = -1
    for it in range(1, max_iter + 1):
        F = np.flatnonzero(free)
        k = len(F)
        K = np.empty((k + 1, k + 1))
        K[:k, :k] = H[F][:, F]
        K[:k, k] = 1.0
        K[k, :k] = 1.0
        K[k, k] = 0.0
        # solve for the step rather than the point: on a singular system the
        # minimum-norm step leaves an already optimal w where it is
        rhs = np.empty(k + 1)
        rhs[:k] = g[F] - K[:k, :k] @ w[F]
        rhs[k] = 0.0
        try:
            sol = np.linalg.solve(K, rhs)
            if (not np.all(np.isfinite(sol))
                    or np.abs(K @ sol - rhs).max() > 1e-10 * (1.0 + np.abs(rhs).max())):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = sol[:k]
        # stationary on this face: the step is tiny or buys nothing, which
        # on ill-conditioned faces happens before the step norm settles
        gain = float(rhs[:k] @ p - 0.5 * p @ K[:k, :k] @ p)
        f_now = 0.5 * w[F] @ K[:k, :k] @ w[F] - g[F] @ w[F]
        if np.abs(p).max() <= eps_step or gain <= 1e-15 * (1.0 + abs(f_now)):
            if k == n:
                return w, free, it, True
            grad = H @ w - g
            mu = grad[F].mean()
            lam = np.where(free, np.inf, grad - mu)
            j = int(np.argmin(lam))
            if lam[j] >= -eps_mult:
                return w, free, it, True
            if j == last_freed:
                # freeing j bought no decrease: optimal up to rounding
                return w, free, it, True
            free[j] = True
            last_freed = j
            continue
        alpha = 1.0
        block = -1
        neg = p < 0
        if neg.any():
            ratios = -w[F][neg] / p[neg]
            r = int(np.argmin(ratios))
            if ratios[r] < 1.0:
                alpha = max(ratios[r], 0.0)
                block = int(F[neg][r])
        w[F] = w[F] + alpha * p
        if block >= 0:
            w[block] = 0.0
            free[block] = False
            if block == last_freed and alpha == 0.0:
                # the freed coordinate is pushed straight back out: no
                # descent direction survives rounding
                return w, free, it, True
        last_freed = -1
        np.maximum(w, 0.0, out=w)
    return w, free, it, False


def _projected_gradient(H, g, w, max_iter, gap_tol):
    lip = float(np.linalg.eigvalsh(H).max())
    if lip <= 0:
        return w, 0
    step = 1.0 / lip
    y = w.copy()
    t = 1.0
    f_prev = _objective(H, g, w)
    for it in range(1, max_iter + 1):
        w_new = project_simplex(y - step * (H @ y - g))
        f_new = _objective(H, g, w_new)
        if f_new > f_prev:
            # adaptive restart of the momentum
            y = w.copy()
            t = 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, t, f_prev = w_new, t_new, f_new
        if it % 10 == 0 and _fw_gap(H, g, w) <= gap_tol:
            return w, it
    return w, max_iter


def warm_qp(H, g, w0, max_iter: int = 10_000) -> np.ndarray:
    """
    Active-set solve from a warm start without certification.

    Used inside outer searches where many nearby problems are solved in
    sequence; callers re-solve the final problem with
    :func:`solve_simplex_qp`.
    """
    scale = max(float(np.abs(H).max()), float(np.abs(g).max()), 1e-300)
    Hs = H / scale
    gs = g / scale
    w = w0.copy()
    w, _, _, ok = _active_set(Hs, gs, w, w > 0, max_iter, eps_mult=1e-12 * 3.0)
    if not ok or _fw_gap(Hs, gs, w) > 1e-5:
        w, _ = _projected_gradient(Hs, gs, w, max_iter, 1e-10)
    return w


def solve_simplex_qp(H, g, w0=None, max_iter: int = 10_000, tol: float = 1e-10) -> QPResult:
    """
    Minimize ``0.5 w'Hw - g'w`` over the probability simplex.

    Parameters
    ----------
    H : ndarray of shape (n, n)
        Symmetric positive semi-definite matrix.
    g : ndarray of shape (n,)
    w0 : ndarray, optional
        Feasible warm start. The default uniform start makes the result a
        deterministic function of ``(H, g)``.
    max_iter : int
        Iteration cap shared by the active-set and gradient phases.
    tol : float
        Duality-gap target (relative to the problem scale) for the gradient
        phase. Active-set KKT points are accepted while their gap is below
        ``sqrt(tol)``.

    Raises
    ------
    ConvergenceError
        The duality gap is still above ``sqrt(tol)`` (scaled) after
        ``max_iter`` iterations.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    if n == 1:
        w = np.ones(1)
        return QPResult(w, float(_objective(H, g, w)), 0.0, 0, "trivial")

    scale = max(float(np.abs(np.diag(H)).max()), float(np.abs(g).max()), 1e-300)
    Hs = 0.5 * (H + H.T) / scale
    gs = g / scale
    if w0 is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.maximum(np.asarray(w0, dtype=float), 0.0)
        w = w / w.sum()
    free = w > 0

    w, free, iters, ok = _active_set(Hs, gs, w, free, max_iter)
    method = "active-set"
    gap = _fw_gap(Hs, gs, w)
    # a KKT point of the active set is accepted even when the Frank-Wolfe gap,
    # a loose bound on flat problems, sits between tol and its square root
    if not ok or gap > np.sqrt(tol):
        w, pg_iters = _projected_gradient(Hs, gs, w, max_iter, tol)
        iters += pg_iters
        method = "active-set+projected-gradient"
        gap = _fw_gap(Hs, gs, w)
        # polish: an exact active-set solve on the gradient phase's support
        wp = np.where(w > 1e-12, w, 0.0)
        wp, _, ap_iters, ok = _active_set(Hs, gs, wp / wp.sum(), wp > 0, max_iter)
        iters += ap_iters
        if ok and _objective(Hs, gs, wp) <= _objective(Hs, gs, w):
            w, gap = wp, _fw_gap(Hs, gs, wp)
            method += "+polish"
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    if gap > np.sqrt(tol):
        raise ConvergenceError(f"simplex QP did not converge: gap {gap:.3e} after {iters} iterations",
                               last_iterate=w, objective=float(_objective(H, g, w)))
    return QPResult(w, float(_objective(H, g, w)), gap * scale, iters, method)
