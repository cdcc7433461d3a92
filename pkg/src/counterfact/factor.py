"""
Latent-factor counterfactuals: interactive fixed effects and matrix completion.

Both estimators treat the treated unit's post-window cells as missing and
impute them from structure learned on the observed cells. Interactive fixed
effects (IFE) estimate factors on donors and a treated loading on the pre
window; matrix completion penalizes the nuclear norm of a low-rank
component fitted jointly with two-way fixed effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from counterfact._util import as_list, child_rng, ordered_map
from counterfact.errors import ConfigError, ConvergenceError, SpecError
from counterfact.panel import Panel, TreatmentSpec
from counterfact.scm import GapSeries
from counterfact.sdid import normal_inference


@dataclass(frozen=True)
class CvConfig:
    """
    Cross-validation settings. Matrix completion holds out ``holdout``
    of the donor cells in each of ``n_folds`` seeded folds.
    """

    n_folds: int = 3
    holdout: float = 0.1


@dataclass(frozen=True)
class FitTolerance:
    tol: float = 1e-9
    max_iter: int = 5000
    check_monotone: bool = False


def _two_way(R: np.ndarray):
    """Least-squares grand mean, unit and time effects of a full matrix."""
    mu = R.mean()
    a = R.mean(axis=1) - mu
    b = R.mean(axis=0) - mu
    return mu, a, b


def _truncated_svd(E: np.ndarray, r: int):
    if r == 0:
        return np.zeros((E.shape[0], 0)), np.zeros(0), np.zeros((0, E.shape[1]))
    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    return U[:, :r], s[:r], Vt[:r]


def ife_donors(Y0: np.ndarray, r: int, tol: float = 1e-9, max_iter: int = 5000):
    """
    Fit ``Y0 = mu + a_j + b_t + Lambda F'`` by alternating least squares.

    Starts from the top-``r`` SVD of the two-way demeaned matrix. Returns
    ``(mu, a, b, loadings, factors, trace)``; loadings are orthonormal
    left singular vectors and factors carry the singular values.
    """
    mu, a, b = _two_way(Y0)
    U, s, Vt = _truncated_svd(Y0 - mu - a[:, None] - b[None, :], r)
    L = (U * s) @ Vt
    trace = []
    scale = max(float(np.sum((Y0 - Y0.mean()) ** 2)), 1e-300)
    for _ in range(max_iter):
        mu, a, b = _two_way(Y0 - L)
        E = Y0 - mu - a[:, None] - b[None, :]
        U, s, Vt = _truncated_svd(E, r)
        L = (U * s) @ Vt
        trace.append(float(np.sum((E - L) ** 2)))
        if len(trace) >= 2 and trace[-2] - trace[-1] <= tol * scale:
            break
    else:
        raise ConvergenceError("interactive fixed effects did not converge",
                               last_iterate=L, objective=trace[-1], trace=trace)
    return mu, a, b, U, Vt.T * s, trace


def _treated_loading(y_pre: np.ndarray, b_pre: np.ndarray, F_pre: np.ndarray):
    X = np.column_stack([np.ones(len(y_pre)), F_pre])
    coef = np.linalg.lstsq(X, y_pre - b_pre, rcond=None)[0]
    return float(coef[0]), coef[1:]


@dataclass
class FactorFit:
    rank: int
    factors: np.ndarray
    loadings: np.ndarray
    treated_loading: np.ndarray
    treated_intercept: float
    time_effects: np.ndarray
    unit_effects: np.ndarray
    counterfactual_path: np.ndarray
    gap: GapSeries
    att: float
    cv_table: Optional[pd.DataFrame] = None
    trace: List[float] = field(default_factory=list)
    n_pre: int = 0
    treated_path: Optional[np.ndarray] = None
    donor_ids: Tuple[str, ...] = ()
    tspec: Optional[TreatmentSpec] = None

    @property
    def periods(self) -> np.ndarray:
        return self.gap.periods

    def reimpute(self, factors: np.ndarray) -> np.ndarray:
        """Counterfactual path implied by an alternative factor matrix
        (for example a rotation ``F @ inv(G).T``)."""
        factors = np.asarray(factors, dtype=float).reshape(len(self.periods), -1)
        n = self.n_pre
        c, lam = _treated_loading(self.treated_path[:n], self.time_effects[:n], factors[:n])
        return c + self.time_effects + factors @ lam

    def fitted_donors(self) -> np.ndarray:
        return self.unit_effects[:, None] + self.time_effects[None, :] + self.loadings @ self.factors.T

    def to_dict(self) -> dict:
        return {
            "estimator": "IFE",
            "rank": self.rank,
            "att": self.att,
            "periods": [int(p) for p in self.periods],
            "counterfactual": as_list(self.counterfactual_path),
            "gap": as_list(self.gap.values),
            "treated_loading": as_list(self.treated_loading),
            "cv": None if self.cv_table is None else self.cv_table.to_dict(orient="list"),
            "objective_trace": as_list(self.trace),
        }


def _columns(panel: Panel, t: TreatmentSpec):
    pre = panel.window_indices(t.pre_window)
    post = panel.window_indices(t.post_window)
    cols = np.concatenate([pre, post])
    y1 = panel.outcomes[panel.unit_index(t.treated_unit), cols]
    Y0 = panel.outcomes[np.ix_([panel.unit_index(d) for d in t.donors], cols)]
    return cols, len(pre), y1, Y0


def ife_arrays(y1: np.ndarray, Y0: np.ndarray, n_pre: int, r: int, tol: FitTolerance = FitTolerance()):
    """IFE counterfactual for the treated series; returns a dict of parts."""
    mu, a, b, U, F, trace = ife_donors(Y0, r, tol.tol, tol.max_iter)
    time_effects = mu + b
    c, lam = _treated_loading(y1[:n_pre], time_effects[:n_pre], F[:n_pre])
    cf = c + time_effects + F @ lam
    return {"cf": cf, "factors": F, "loadings": U, "unit_effects": a, "time_effects": time_effects,
            "intercept": c, "treated_loading": lam, "trace": trace}


def _loo_rank_error(y1, time_effects, F, n_pre) -> float:
    errs = []
    for s in range(n_pre):
        keep = np.delete(np.arange(n_pre), s)
        c, lam = _treated_loading(y1[keep], time_effects[keep], F[keep])
        errs.append(y1[s] - (c + time_effects[s] + F[s] @ lam))
    return float(np.mean(np.square(errs)))


def fit_ife(panel: Panel, tspec: TreatmentSpec, r_candidates: Optional[Sequence[int]] = None,
            cv_config: Optional[CvConfig] = None, seed: int = 0,
            tolerance: FitTolerance = FitTolerance()) -> FactorFit:
    """
    Interactive fixed-effects imputation with cross-validated rank.

    The rank is chosen by leave-one-pre-period-out prediction error of the
    treated unit (ties go to the smaller rank). ``seed`` is accepted for a
    uniform estimator interface; the fit is deterministic.

    Raises
    ------
    SpecError
        A candidate rank is not below ``min(N - 1, T_pre - 1)``.
    """
    t = tspec.resolve(panel)
    cols, n_pre, y1, Y0 = _columns(panel, t)
    limit = min(panel.n_units - 1, n_pre - 1)
    if r_candidates is None:
        r_candidates = range(0, min(limit, 6))
    r_candidates = sorted(set(int(r) for r in r_candidates))
    if not r_candidates or r_candidates[0] < 0 or r_candidates[-1] >= limit:
        raise SpecError(f"candidate ranks must lie in [0, {limit - 1}] for this panel")

    if len(r_candidates) == 1:
        best, table = r_candidates[0], None
    else:
        errors = []
        for r in r_candidates:
            mu, a, b, U, F, _ = ife_donors(Y0, r, tolerance.tol, tolerance.max_iter)
            errors.append(_loo_rank_error(y1, mu + b, F, n_pre))
        errors = np.array(errors)
        slack = 1e-10 * (float(np.var(y1[:n_pre])) + 1e-300) + 1e-9 * errors.min()
        best = r_candidates[int(np.flatnonzero(errors <= errors.min() + slack)[0])]
        table = pd.DataFrame({"rank": r_candidates, "cv_mse": errors})

    p = ife_arrays(y1, Y0, n_pre, best, tolerance)
    periods = panel.periods[cols]
    gap = GapSeries(periods, y1 - p["cf"])
    att = float(np.mean(gap.values[n_pre:]))
    return FactorFit(best, p["factors"], p["loadings"], p["treated_loading"], p["intercept"],
                     p["time_effects"], p["unit_effects"], p["cf"], gap, att, table, p["trace"],
                     n_pre, y1.copy(), tuple(t.donors), t)


def _svt(M, mask, lambda_nn, L):
    filled = np.where(mask, M, L)
    U, s, Vt = np.linalg.svd(filled, full_matrices=False)
    s = np.maximum(s - lambda_nn, 0.0)
    k = int(np.count_nonzero(s))
    return (U[:, :k] * s[:k]) @ Vt[:k], float(s.sum())


def soft_threshold_step(M: np.ndarray, mask: np.ndarray, lambda_nn: float,
                        L: np.ndarray) -> np.ndarray:
    """
    One soft-impute iteration: fill unobserved cells of ``M`` from ``L``,
    shrink the singular values of the result by ``lambda_nn`` and rebuild.
    """
    if lambda_nn < 0:
        raise ConfigError("nuclear-norm penalty must be nonnegative")
    return _svt(M, mask, lambda_nn, L)[0]


class _FixedEffects:
    """Least-squares two-way effects on an observed-cell pattern."""

    def __init__(self, mask: np.ndarray):
        N, T = mask.shape
        self.mask = mask
        rows, cols = np.nonzero(mask)
        X = np.zeros((len(rows), N + T))
        X[np.arange(len(rows)), rows] = 1.0
        X[np.arange(len(rows)), N + cols] = 1.0
        self.pinv = np.linalg.pinv(X)
        self.N = N

    def fit(self, R: np.ndarray):
        coef = self.pinv @ R[self.mask]
        a, b = coef[:self.N], coef[self.N:]
        shift = b.mean()
        return a + shift, b - shift


def mc_objective(M, mask, a, b, L, lambda_nn, nuclear=None) -> float:
    resid = (M - a[:, None] - b[None, :] - L)[mask]
    if nuclear is None:
        nuclear = np.linalg.svd(L, compute_uv=False).sum() if lambda_nn > 0 else 0.0
    return float(0.5 * resid @ resid + lambda_nn * nuclear)


def mc_arrays(M: np.ndarray, mask: np.ndarray, lambda_nn: float, L0: Optional[np.ndarray] = None,
              tolerance: FitTolerance = FitTolerance(), fe: Optional[_FixedEffects] = None):
    """
    Minimize ``0.5 * ||P_mask(M - a - b - L)||^2 + lambda_nn * ||L||_*``.

    The fixed effects are profiled out exactly; ``L`` follows soft-impute
    steps (proximal gradient steps on the profiled objective) with momentum.
    A momentum step is kept only when it does not raise the objective,
    otherwise a plain step is taken and the momentum restarts, so the
    recorded objective never increases.

    Returns ``(a, b, L, trace)``.
    """
    fe = fe or _FixedEffects(mask)
    L = np.zeros_like(M) if L0 is None else L0.copy()
    a, b = fe.fit(M - L)
    f = mc_objective(M, mask, a, b, L, lambda_nn)
    trace = [f]
    scale = max(float(np.sum(M[mask] ** 2)), 1e-300)
    L_prev, t = L, 1.0

    def step(base):
        ab = fe.fit(M - base)
        L_new, nuc = _svt(M - ab[0][:, None] - ab[1][None, :], mask, lambda_nn, base)
        a_new, b_new = fe.fit(M - L_new)
        return L_new, a_new, b_new, mc_objective(M, mask, a_new, b_new, L_new, lambda_nn, nuc)

    for _ in range(tolerance.max_iter):
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        Y = L + ((t - 1.0) / t_next) * (L - L_prev)
        L_new, a_new, b_new, f_new = step(Y)
        if f_new > f:
            L_new, a_new, b_new, f_new = step(L)
            t_next = 1.0
        if tolerance.check_monotone and f_new > f + 1e-12 * scale:
            raise ConvergenceError("soft-impute objective increased", last_iterate=L_new,
                                   objective=f_new, trace=trace + [f_new])
        moved = float(np.sum((L_new - L) ** 2))
        L_prev, L, a, b, t = L, L_new, a_new, b_new, t_next
        trace.append(f_new)
        size = max(float(np.sum(L ** 2)), scale * 1e-12)
        # the second test stops rounding-level stagnation, not slow progress
        if moved <= tolerance.tol ** 2 * size \
                or (f - f_new <= 1e-15 * scale and t_next == 1.0 and moved <= tolerance.tol * size):
            return a, b, L, trace
        f = f_new
    raise ConvergenceError(f"matrix completion did not converge in {tolerance.max_iter} iterations",
                           last_iterate=L, objective=trace[-1], trace=trace)


@dataclass
class McFit:
    lambda_nn: float
    low_rank: np.ndarray
    unit_effects: np.ndarray
    time_effects: np.ndarray
    counterfactual_path: np.ndarray
    gap: GapSeries
    att: float
    cv_table: Optional[pd.DataFrame] = None
    iterations: int = 0
    trace: List[float] = field(default_factory=list)
    n_pre: int = 0
    units: Tuple[str, ...] = ()
    tspec: Optional[TreatmentSpec] = None

    @property
    def periods(self) -> np.ndarray:
        return self.gap.periods

    @property
    def nuclear_norm(self) -> float:
        return float(np.linalg.svd(self.low_rank, compute_uv=False).sum())

    def fitted(self) -> np.ndarray:
        return self.unit_effects[:, None] + self.time_effects[None, :] + self.low_rank

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": np.arange(len(self.trace)), "objective": self.trace})

    def to_dict(self) -> dict:
        return {
            "estimator": "MC",
            "lambda": self.lambda_nn,
            "att": self.att,
            "iterations": self.iterations,
            "nuclear_norm": self.nuclear_norm,
            "periods": [int(p) for p in self.periods],
            "counterfactual": as_list(self.counterfactual_path),
            "gap": as_list(self.gap.values),
            "cv": None if self.cv_table is None else self.cv_table.to_dict(orient="list"),
        }


def default_lambda_grid(Y0: np.ndarray, n: int = 20) -> np.ndarray:
    """``n`` log-spaced penalties from ``1e-4 * s_max`` to ``s_max`` of the
    two-way demeaned donor matrix, largest first."""
    mu, a, b = _two_way(Y0)
    smax = float(np.linalg.svd(Y0 - mu - a[:, None] - b[None, :], compute_uv=False)[0])
    smax = smax if smax > 0 else 1.0
    return smax * np.logspace(0, -4, n)


def _mc_matrix(panel: Panel, t: TreatmentSpec):
    cols, n_pre, y1, Y0 = _columns(panel, t)
    M = np.vstack([y1, Y0])
    mask = np.ones_like(M, dtype=bool)
    mask[0, n_pre:] = False
    return cols, n_pre, M, mask


def mc_path(M, mask, lambdas, tolerance: FitTolerance = FitTolerance()):
    """Fits along a penalty path (largest first), warm-starting each fit."""
    fe = _FixedEffects(mask)
    out, L = [], None
    for lam in lambdas:
        a, b, L, trace = mc_arrays(M, mask, float(lam), L, tolerance, fe)
        out.append((a, b, L, trace))
    return out


def fit_matrix_completion(panel: Panel, tspec: TreatmentSpec,
                          lambda_grid: Optional[Union[float, Sequence[float]]] = None,
                          cv_config: Optional[CvConfig] = None, seed: int = 0,
                          tolerance: FitTolerance = FitTolerance()) -> McFit:
    """
    Nuclear-norm matrix completion with two-way fixed effects.

    The treated unit's post-window cells are unobserved. A single penalty
    is used as given; with several, donor cells are held out in seeded
    folds and the penalty with the smallest held-out error is refit on all
    observed cells.
    """
    t = tspec.resolve(panel)
    cols, n_pre, M, mask = _mc_matrix(panel, t)
    if lambda_grid is None:
        lambdas = default_lambda_grid(M[1:])
    else:
        lambdas = np.sort(np.atleast_1d(np.asarray(lambda_grid, dtype=float)))[::-1]
    if len(lambdas) == 0 or np.any(lambdas < 0):
        raise ConfigError("lambda grid must be nonempty and nonnegative")
    cc = cv_config or CvConfig()
    table = None
    if len(lambdas) == 1:
        best = float(lambdas[0])
    else:
        errors = np.zeros(len(lambdas))
        rng = child_rng(seed, 0)
        donor_cells = np.argwhere(mask[1:]) + [1, 0]
        n_hold = max(1, int(round(cc.holdout * len(donor_cells))))
        for fold in range(cc.n_folds):
            pick = donor_cells[rng.choice(len(donor_cells), size=n_hold, replace=False)]
            train = mask.copy()
            train[pick[:, 0], pick[:, 1]] = False
            for k, (a, b, L, _) in enumerate(mc_path(M, train, lambdas, tolerance)):
                pred = a[pick[:, 0]] + b[pick[:, 1]] + L[pick[:, 0], pick[:, 1]]
                errors[k] += np.mean((M[pick[:, 0], pick[:, 1]] - pred) ** 2) / cc.n_folds
        best = float(lambdas[int(np.argmin(errors))])
        table = pd.DataFrame({"lambda": lambdas, "cv_mse": errors})
    a, b, L, trace = mc_arrays(M, mask, best, None, tolerance)
    cf = a[0] + b + L[0]
    periods = panel.periods[cols]
    gap = GapSeries(periods, M[0] - cf)
    att = float(np.mean(gap.values[n_pre:]))
    return McFit(best, L, a, b, cf, gap, att, table, len(trace) - 1, trace, n_pre,
                 (t.treated_unit, *t.donors), t)


@dataclass
class FactorInference:
    estimate: float
    se: float
    ci: Tuple[float, float]
    p_value: float
    replications: int
    block_length: int
    replicate_estimates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    level: float = 0.95
    method: str = "residual block bootstrap"

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "ci": list(self.ci),
                "p_value": self.p_value, "replications": self.replications,
                "block_length": self.block_length, "level": self.level, "method": self.method}


def _block_resample(series: np.ndarray, length: int, b: int, rng: np.random.Generator) -> np.ndarray:
    b = min(b, len(series))
    n_blocks = math.ceil(length / b)
    starts = rng.integers(0, len(series) - b + 1, size=n_blocks)
    return np.concatenate([series[s:s + b] for s in starts])[:length]


def factor_inference(panel: Panel, tspec: TreatmentSpec, fit: Union[FactorFit, McFit],
                     n_reps: int = 500, seed: int = 0, block_length: Optional[int] = None,
                     workers: int = 1, level: float = 0.95,
                     tolerance: FitTolerance = FitTolerance()) -> FactorInference:
    """
    Residual block bootstrap under the null of no effect.

    Residuals from the fit are resampled in moving blocks over time within
    each unit (the treated unit draws from its pre-window residuals only),
    added to the fitted untreated surface, and the estimator is refit with
    its tuning (rank or penalty) held fixed. SE is the standard deviation of
    the pseudo ATTs; CI and p-value use the normal reference.
    """
    if n_reps < 50:
        raise ConfigError("n_reps must be at least 50")
    t = tspec.resolve(panel)
    cols, n_pre, y1, Y0 = _columns(panel, t)
    T = len(cols)
    if isinstance(fit, FactorFit):
        fitted = np.vstack([fit.counterfactual_path, fit.fitted_donors()])
    else:
        fitted = fit.fitted()
    observed = np.vstack([y1, Y0])
    resid = observed - fitted
    b = block_length or math.ceil(n_pre ** (1.0 / 3.0))
    mask = np.ones_like(observed, dtype=bool)
    mask[0, n_pre:] = False
    fe = None if isinstance(fit, FactorFit) else _FixedEffects(mask)

    def replicate(k):
        rng = child_rng(seed, k)
        E = np.empty_like(resid)
        E[0] = _block_resample(resid[0, :n_pre], T, b, rng)
        for i in range(1, len(resid)):
            E[i] = _block_resample(resid[i], T, b, rng)
        Y = fitted + E
        if isinstance(fit, FactorFit):
            cf = ife_arrays(Y[0], Y[1:], n_pre, fit.rank, tolerance)["cf"]
        else:
            a, bb, L, _ = mc_arrays(Y, mask, fit.lambda_nn, None, tolerance, fe)
            cf = a[0] + bb + L[0]
        return float(np.mean(Y[0, n_pre:] - cf[n_pre:]))

    atts = np.array(ordered_map(replicate, range(n_reps), workers))
    se = float(np.std(atts))
    ci, p = normal_inference(fit.att, se, level, scale=float(np.abs(observed).max()))
    return FactorInference(fit.att, se, ci, p, n_reps, b, atts, level)
