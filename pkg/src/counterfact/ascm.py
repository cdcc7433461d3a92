"""
Ridge-augmented synthetic control and conformal confidence intervals.

The augmentation regresses the base fit's pre-window residuals on donor
outcomes with a ridge penalty and adds the fitted extrapolation to the
counterfactual. Conformal intervals invert permutation tests of candidate
effects against residuals pooled over pre and (null-adjusted) post periods.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from counterfact._util import as_list, child_rng, ordered_map
from counterfact.errors import ConfigError, GridError, SingularityError
from counterfact.panel import Panel, PredictorSpec, TreatmentSpec, build_predictors
from counterfact.scm import GapSeries, ScmFit, SolverConfig, fit_scm
from counterfact.simplex import solve_simplex_qp


@dataclass(frozen=True)
class RidgeConfig:
    """
    ``penalty`` is a nonnegative float or ``"cv"`` (leave-one-out over a
    log grid). ``augment_on`` picks the ridge design: donor pre-window
    ``"outcomes"`` or standardized ``"predictors"``.
    """

    penalty: Union[float, str] = "cv"
    grid: Optional[Tuple[float, ...]] = None
    augment_on: str = "outcomes"


@dataclass
class AscmFit:
    base: ScmFit
    ridge_penalty: float
    ridge_coefficients: np.ndarray
    corrected_path: np.ndarray
    corrected_gap: GapSeries
    att: float
    augment_on: str = "outcomes"
    cv_table: Optional[pd.DataFrame] = None

    @property
    def periods(self) -> np.ndarray:
        return self.corrected_gap.periods

    @property
    def pre_mspe(self) -> float:
        return float(np.mean(self.corrected_gap.window(self.base.tspec.pre_window) ** 2))

    def paths_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"year": self.periods, "treated": self.base.treated_path,
                             "synthetic": self.base.synthetic_path,
                             "augmented": self.corrected_path, "gap": self.corrected_gap.values})

    def to_dict(self) -> dict:
        return {
            "estimator": "ASCM",
            "augment_on": self.augment_on,
            "ridge_penalty": self.ridge_penalty,
            "ridge_coefficients": dict(zip(self.base.weights.donor_ids,
                                           as_list(self.ridge_coefficients))),
            "scm_weights": self.base.weights.as_dict(),
            "periods": [int(p) for p in self.periods],
            "augmented": as_list(self.corrected_path),
            "gap": as_list(self.corrected_gap.values),
            "att": self.att,
            "pre_mspe": self.pre_mspe,
            "base_pre_mspe": self.base.pre_mspe,
            "cv": None if self.cv_table is None else self.cv_table.to_dict(orient="list"),
        }


def _ridge_svd(Z: np.ndarray):
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    return U, s, Vt


def ridge_coefficients(Z: np.ndarray, r: np.ndarray, penalty: float) -> np.ndarray:
    """Ridge solution of ``r ~ Z beta`` via the SVD of ``Z``."""
    U, s, Vt = _ridge_svd(Z)
    if penalty == 0:
        rank = int(np.sum(s > s.max() * max(Z.shape) * np.finfo(float).eps)) if len(s) else 0
        if rank < Z.shape[1]:
            raise SingularityError("ridge design is rank deficient at penalty 0; "
                                   "use a positive penalty")
        return Vt.T @ ((U.T @ r) / s)
    return Vt.T @ ((s / (s ** 2 + penalty)) * (U.T @ r))


def _cv_penalty(Z: np.ndarray, r: np.ndarray, grid: Optional[Sequence[float]]):
    U, s, Vt = _ridge_svd(Z)
    smax2 = float(s.max() ** 2) if len(s) and s.max() > 0 else 1.0
    if grid is None:
        grid = smax2 * np.logspace(-6, 2, 33)
    grid = np.asarray(grid, dtype=float)
    Ur = U.T @ r
    errors = []
    for lam in grid:
        shrink = s ** 2 / (s ** 2 + lam)
        fitted = U @ (shrink * Ur)
        hat = np.sum(U ** 2 * shrink, axis=1)
        loo = (r - fitted) / (1.0 - hat)
        errors.append(float(np.mean(loo ** 2)))
    errors = np.asarray(errors)
    # ties go to the larger penalty
    best = int(len(grid) - 1 - np.argmin(errors[::-1]))
    return float(grid[best]), pd.DataFrame({"penalty": grid, "loo_mse": errors})


def fit_ascm(panel: Panel, tspec: TreatmentSpec, pspec: Optional[PredictorSpec] = None,
             ridge_config: Optional[RidgeConfig] = None,
             solver_config: Optional[SolverConfig] = None,
             base: Optional[ScmFit] = None) -> AscmFit:
    """
    Augment a synthetic control with a ridge outcome model.

    Parameters
    ----------
    base : ScmFit, optional
        Reuse an existing SCM fit instead of refitting.

    Raises
    ------
    SingularityError
        Penalty 0 with a rank-deficient ridge design.
    """
    rc = ridge_config or RidgeConfig()
    t = tspec.resolve(panel)
    base = base or fit_scm(panel, t, pspec, solver_config)
    idx0 = [panel.unit_index(d) for d in t.donors]
    span = np.array([panel.period_index(p) for p in base.periods])
    pre = (base.periods >= t.pre_window[0]) & (base.periods <= t.pre_window[1])
    Y0 = panel.outcomes[np.ix_(idx0, span)]

    if rc.augment_on == "outcomes":
        Z = Y0[:, pre].T
        r = base.gap.values[pre]
    elif rc.augment_on == "predictors":
        if pspec is None:
            raise ConfigError("predictor-based augmentation needs a PredictorSpec")
        pm = build_predictors(panel, t, pspec)
        Z = pm.x_donors
        r = pm.x_treated - pm.x_donors @ base.weights.w
    else:
        raise ConfigError(f"augment_on must be 'outcomes' or 'predictors', got {rc.augment_on!r}")

    cv_table = None
    if isinstance(rc.penalty, str):
        if rc.penalty != "cv":
            raise ConfigError(f"ridge penalty must be a number or 'cv', got {rc.penalty!r}")
        if not np.any(r):
            lam = float("inf")
        else:
            lam, cv_table = _cv_penalty(Z, r, rc.grid)
    else:
        lam = float(rc.penalty)
        if lam < 0:
            raise ConfigError("ridge penalty must be nonnegative")

    if not np.any(r) or math.isinf(lam):
        beta = np.zeros(len(idx0))
    else:
        beta = ridge_coefficients(Z, r, lam)
    corrected = base.synthetic_path + beta @ Y0
    gap = GapSeries(base.periods.copy(), base.treated_path - corrected)
    att = float(np.mean(gap.window(t.post_window)))
    return AscmFit(base, lam, beta, corrected, gap, att, rc.augment_on, cv_table)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator used inside placebo and conformal refits."""

    name: str = "scm"
    pspec: Optional[PredictorSpec] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    ridge: RidgeConfig = field(default_factory=RidgeConfig)


@dataclass(frozen=True)
class GridConfig:
    """Candidate effects: ``n_points`` between ``lower`` and ``upper``.

    Unset bounds default to ``att -/+ half_width_sd * spread`` where spread
    is the standard deviation of the pre-window gaps. Default bounds are
    doubled (at most ``max_doublings`` times) until both end points are
    rejected; explicit bounds are used as given.
    """

    n_points: int = 201
    lower: Optional[float] = None
    upper: Optional[float] = None
    half_width_sd: float = 4.0
    max_doublings: int = 6


@dataclass(frozen=True)
class PermutationConfig:
    """
    ``scheme`` is ``"moving-block"`` (default), ``"iid"`` or ``"circular"``.
    ``block_length`` defaults to ``ceil(T ** (1/3))``. iid permutations are
    enumerated exactly when there are at most ``max_exhaustive`` distinct
    post-period assignments.
    """

    scheme: str = "moving-block"
    block_length: Optional[int] = None
    n_permutations: int = 1000
    max_exhaustive: int = 5000


@dataclass
class ConformalResult:
    grid: np.ndarray
    p_values: np.ndarray
    interval: Optional[Tuple[float, float]]
    contiguous: bool
    level: float
    estimate: float
    metadata: dict = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"theta0": self.grid, "p_value": self.p_values})

    def to_dict(self) -> dict:
        return {
            "estimator": "ASCM" if self.metadata.get("estimator") == "ascm" else "SCM",
            "estimate": self.estimate,
            "alpha": self.level,
            "confidence": 1.0 - self.level,
            "interval": None if self.interval is None else list(self.interval),
            "contiguous": self.contiguous,
            "theta0": as_list(self.grid),
            "p_value": as_list(self.p_values),
            "metadata": self.metadata,
        }


def permutation_indices(T: int, n_post: int, config: PermutationConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """
    Rows of the returned array are permutations of ``range(T)`` and always
    include the identity. Under the exact iid scheme every distinct choice
    of post-period positions appears once.
    """
    ident = np.arange(T)
    if config.scheme == "iid":
        n_sets = math.comb(T, n_post)
        if n_sets <= config.max_exhaustive:
            rows = []
            for post_pos in itertools.combinations(range(T), n_post):
                rest = [i for i in range(T) if i not in post_pos]
                rows.append(rest + list(post_pos))
            return np.array(rows)
        perms = rng.permuted(np.tile(ident, (config.n_permutations, 1)), axis=1)
        return np.vstack([ident, perms])
    if config.scheme == "circular":
        return np.array([np.roll(ident, -k) for k in range(T)])
    if config.scheme == "moving-block":
        b = config.block_length or math.ceil(T ** (1.0 / 3.0))
        n = config.n_permutations
        block_of = ident // b
        n_blocks = int(block_of[-1]) + 1
        offsets = rng.integers(T, size=n)
        order = np.argsort(rng.random((n, n_blocks)), axis=1)
        rank = np.argsort(order, axis=1)
        # sort positions by (rank of their block, position within block)
        perms = np.argsort(rank[:, block_of] * T + ident, axis=1, kind="stable")
        perms = (perms + offsets[:, None]) % T
        return np.vstack([ident, perms])
    raise ConfigError(f"unknown permutation scheme {config.scheme!r}")


def permutation_pvalue(u: np.ndarray, n_post: int, perms: np.ndarray) -> float:
    """Share of permutations whose mean absolute post residual is at least
    the observed one. The last ``n_post`` entries of ``u`` are post periods."""
    a = np.abs(np.asarray(u, dtype=float))
    stats = a[perms[:, -n_post:]].mean(axis=1)
    observed = a[-n_post:].mean()
    tol = 1e-12 * max(float(a.max()), 1e-300)
    return float(np.mean(stats >= observed - tol))


def conformal_interval(panel: Panel, tspec: TreatmentSpec, pspec: Optional[PredictorSpec] = None,
                       estimator_config: Optional[EstimatorConfig] = None,
                       grid_config: Optional[GridConfig] = None,
                       permutation_config: Optional[PermutationConfig] = None,
                       alpha: float = 0.1, seed: int = 0, workers: int = 1) -> ConformalResult:
    """
    Conformal confidence set for a constant post-window effect.

    For each candidate effect the treated post outcomes are shifted by it,
    the estimator is refit on all periods by outcome matching (the ASCM
    ridge penalty is chosen once on the original fit and then held fixed),
    and the mean absolute post residual is compared with its permutation
    distribution. The reported interval is the hull of accepted candidates.

    Raises
    ------
    GridError
        An end point of the grid is not rejected, so the set is not
        bracketed.
    """
    ec = estimator_config or EstimatorConfig(name="ascm", pspec=pspec)
    gc = grid_config or GridConfig()
    pc = permutation_config or PermutationConfig()
    if ec.name not in ("scm", "ascm"):
        raise ConfigError("conformal inference supports the 'scm' and 'ascm' estimators")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    t = tspec.resolve(panel)
    base = fit_scm(panel, t, pspec or ec.pspec, ec.solver)
    if ec.name == "ascm":
        first = fit_ascm(panel, t, pspec or ec.pspec, ec.ridge, base=base)
        estimate, lam = first.att, first.ridge_penalty
    else:
        estimate, lam = float(np.mean(base.gap.window(t.post_window))), float("inf")
    pre_idx = panel.window_indices(t.pre_window)
    post_idx = panel.window_indices(t.post_window)
    cols = np.concatenate([pre_idx, post_idx])
    n_post = len(post_idx)
    i1 = panel.unit_index(t.treated_unit)
    idx0 = [panel.unit_index(d) for d in t.donors]
    y1 = panel.outcomes[i1, cols]
    Y0 = panel.outcomes[np.ix_(idx0, cols)]
    H = 2.0 * Y0 @ Y0.T
    shift = np.zeros(len(cols))
    shift[-n_post:] = 1.0
    use_ridge = ec.name == "ascm" and not math.isinf(lam)
    if use_ridge:
        U, s, Vt = _ridge_svd(Y0.T)
        shrink = s / (s ** 2 + lam) if lam > 0 else np.where(s > 0, 1.0 / np.where(s > 0, s, 1), 0)

    def residuals(theta):
        y = y1 - theta * shift
        w = solve_simplex_qp(H, 2.0 * Y0 @ y, max_iter=ec.solver.max_iter, tol=ec.solver.tol).w
        u = y - w @ Y0
        if use_ridge:
            beta = Vt.T @ (shrink * (U.T @ u))
            u = u - Y0.T @ beta
        return u

    def pvalue_at(theta, key):
        perms = permutation_indices(len(cols), n_post, pc, child_rng(seed, *key))
        return permutation_pvalue(residuals(theta), n_post, perms)

    spread = float(np.std(base.gap.window(t.pre_window), ddof=1))
    half = gc.half_width_sd * (spread if spread > 0 else 1e-3 * (1.0 + abs(estimate)))
    if gc.lower is None and gc.upper is None:
        for k in range(gc.max_doublings):
            # probe the end points before paying for the full grid
            if (pvalue_at(estimate - half, (k, 0)) <= alpha
                    and pvalue_at(estimate + half, (k, 1)) <= alpha):
                break
            half *= 2.0
    lo = estimate - half if gc.lower is None else gc.lower
    hi = estimate + half if gc.upper is None else gc.upper
    grid = np.linspace(lo, hi, gc.n_points)
    p = np.array(ordered_map(lambda i: pvalue_at(grid[i], (i,)), range(len(grid)), workers))
    accepted = np.flatnonzero(p > alpha)
    if len(accepted) == 0:
        interval, contiguous = None, False
    else:
        if accepted[0] == 0 or accepted[-1] == len(grid) - 1:
            raise GridError("confidence set reaches the edge of the grid; widen the grid", grid, p)
        interval = (float(grid[accepted[0]]), float(grid[accepted[-1]]))
        contiguous = bool(np.all(np.diff(accepted) == 1))
    meta = {
        "estimator": ec.name,
        "ridge_penalty": lam if use_ridge else None,
        "scheme": pc.scheme,
        "block_length": (pc.block_length or math.ceil(len(cols) ** (1 / 3)))
        if pc.scheme == "moving-block" else None,
        "statistic": "mean absolute post-window residual",
        "fit": "outcome matching over pre and post windows",
        "seed": seed,
        "grid_half_width": half,
    }
    return ConformalResult(grid, p, interval, contiguous, alpha, estimate, meta)
