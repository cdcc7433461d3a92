"""
Classic synthetic control.

Donor weights solve a simplex-constrained quadratic program in predictor
space; predictor importances ``v`` are chosen by a nested search that
minimizes the pre-window outcome MSPE of the induced weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from counterfact._util import as_list, child_rng, safe_div
from counterfact.errors import DegenerateError, SpecError
from counterfact.panel import (Panel, PredictorMatrices, PredictorSpec, TreatmentSpec,
                               build_predictors)
from counterfact.simplex import solve_simplex_qp, warm_qp


@dataclass(frozen=True)
class SolverConfig:
    """
    Settings for :func:`fit_scm`.

    ``v_method`` is ``"nested"`` (default), ``"regression"``, ``"equal"`` or
    an explicit vector of predictor weights. ``initial_v`` adds extra
    starting points to the nested search; ``outer_maxfev`` caps objective
    evaluations per restart (default ``40 * K``, at least 100).
    ``initial_w`` maps donor ids to a warm start for the final donor-weight
    solve; when the optimum is not unique this selects the optimal solution
    reached from that start instead of the one reached from uniform weights.
    """

    max_iter: int = 10_000
    tol: float = 1e-10
    restarts: int = 8
    v_method: Union[str, Tuple[float, ...]] = "nested"
    outer_maxfev: Optional[int] = None
    seed: int = 0
    initial_v: Tuple[Tuple[float, ...], ...] = ()
    initial_w: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True)
class WeightVector:
    donor_ids: Tuple[str, ...]
    w: np.ndarray
    objective: float = float("nan")

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.donor_ids, as_list(self.w)))

    def __getitem__(self, donor: str) -> float:
        return float(self.w[self.donor_ids.index(donor)])


@dataclass(frozen=True)
class PredictorWeights:
    v: np.ndarray
    labels: Tuple[str, ...] = ()


@dataclass(frozen=True)
class GapSeries:
    """Observed minus counterfactual outcome, per period."""

    periods: np.ndarray
    values: np.ndarray

    def window(self, window: Tuple[int, int]) -> np.ndarray:
        lo, hi = window
        return self.values[(self.periods >= lo) & (self.periods <= hi)]

    def at(self, period: int) -> float:
        return float(self.values[int(np.flatnonzero(self.periods == period)[0])])


@dataclass
class ScmFit:
    weights: WeightVector
    v: PredictorWeights
    treated_path: np.ndarray
    synthetic_path: np.ndarray
    gap: GapSeries
    pre_mspe: float
    solver_report: dict
    tspec: TreatmentSpec

    @property
    def periods(self) -> np.ndarray:
        return self.gap.periods

    def paths_frame(self) -> pd.DataFrame:
        """Plot data with columns ``year,treated,synthetic,gap``."""
        return pd.DataFrame({"year": self.periods, "treated": self.treated_path,
                             "synthetic": self.synthetic_path, "gap": self.gap.values})

    def to_dict(self) -> dict:
        return {
            "treated_unit": self.tspec.treated_unit,
            "intervention_period": self.tspec.intervention_period,
            "weights": self.weights.as_dict(),
            "predictor_weights": dict(zip(self.v.labels, as_list(self.v.v))),
            "periods": [int(p) for p in self.periods],
            "treated": as_list(self.treated_path),
            "synthetic": as_list(self.synthetic_path),
            "gap": as_list(self.gap.values),
            "pre_mspe": self.pre_mspe,
            "solver_report": self.solver_report,
        }


@dataclass
class EffectSummary:
    """
    Post-window effect summaries.

    Percentages are fractions (``-0.15`` is -15%). ``pct_vs_last_pre``
    divides the ATT by the treated outcome in the last pre-intervention
    period. Undefined ratios are None.
    """

    att: float
    pct_vs_synthetic: Optional[float]
    pct_vs_last_pre: Optional[float]
    decade_effects: Dict[int, float] = field(default_factory=dict)
    window_split: Optional[Tuple[Optional[float], Optional[float]]] = None
    split_year: Optional[int] = None
    last_pre_period: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "att": self.att,
            "pct_vs_synthetic": self.pct_vs_synthetic,
            "pct_vs_last_pre": self.pct_vs_last_pre,
            "pct_vs_last_pre_denominator": f"treated outcome in {self.last_pre_period}",
            "decade_effects": {str(k): v for k, v in self.decade_effects.items()},
            "window_split": None if self.window_split is None else {
                "split_year": self.split_year,
                "before_split": self.window_split[0],
                "from_split": self.window_split[1],
            },
        }


def inner_weights(x_treated, x_donors, v, solver_config: Optional[SolverConfig] = None,
                  donor_ids: Optional[Sequence[str]] = None, w0=None) -> WeightVector:
    """
    Donor weights minimizing ``sum_k v_k (x1_k - (X0 w)_k)^2`` on the simplex.

    Parameters
    ----------
    x_treated : ndarray of shape (K,)
    x_donors : ndarray of shape (K, J)
    v : ndarray of shape (K,) or PredictorWeights
    donor_ids : sequence of str, optional
        Labels for the returned weights; defaults to ``d0, d1, ...``.
    w0 : ndarray, optional
        Warm start. Leave unset for the deterministic uniform start.
    """
    cfg = solver_config or SolverConfig()
    x1 = np.asarray(x_treated, dtype=float)
    X0 = np.asarray(x_donors, dtype=float)
    v = np.asarray(v.v if isinstance(v, PredictorWeights) else v, dtype=float)
    if X0.ndim != 2 or X0.shape[1] == 0:
        raise SpecError("at least one donor is required")
    if X0.shape[0] != x1.shape[0] or v.shape[0] != x1.shape[0]:
        raise SpecError("predictor dimensions disagree")
    XV = X0.T * v
    res = solve_simplex_qp(2.0 * XV @ X0, 2.0 * XV @ x1, w0=w0,
                           max_iter=cfg.max_iter, tol=cfg.tol)
    ids = tuple(donor_ids) if donor_ids is not None else tuple(f"d{j}" for j in range(X0.shape[1]))
    resid = x1 - X0 @ res.w
    return WeightVector(ids, res.w, float(np.sum(v * resid ** 2)))


def _regression_v(panel: Panel, t: TreatmentSpec, pm: PredictorMatrices) -> np.ndarray:
    rows = [panel.unit_index(t.treated_unit)] + [panel.unit_index(d) for d in t.donors]
    Z = panel.outcomes[rows][:, panel.window_indices(t.pre_window)]
    X = np.column_stack([np.ones(len(rows)),
                         np.column_stack([pm.x_treated[:, None], pm.x_donors]).T])
    B = np.linalg.lstsq(X, Z, rcond=None)[0][1:]
    v = np.sum(B ** 2, axis=1)
    if v.sum() <= 0:
        return np.full(len(v), 1.0 / len(v))
    return v / v.sum()


def _to_simplex(theta: np.ndarray) -> np.ndarray:
    a = np.abs(theta)
    s = a.sum()
    return a / s if s > 0 else np.full(len(a), 1.0 / len(a))


def _search_v(loss, K: int, starts, cfg: SolverConfig):
    maxfev = cfg.outer_maxfev or max(100, 40 * K)
    best_v, best_loss, n_eval = None, np.inf, 0
    for v0 in starts:
        f0 = loss(v0)
        n_eval += 1
        if f0 < best_loss:
            best_v, best_loss = v0, f0
        if best_loss <= 1e-14:
            break
        res = minimize(lambda th: loss(_to_simplex(th)), np.asarray(v0, dtype=float),
                       method="Nelder-Mead",
                       options={"maxfev": maxfev, "xatol": 1e-4, "fatol": 1e-10})
        n_eval += int(res.nfev)
        v1 = _to_simplex(res.x)
        f1 = loss(v1)
        if f1 < best_loss:
            best_v, best_loss = v1, f1
        if best_loss <= 1e-14:
            break
    return best_v, best_loss, n_eval


def fit_scm(panel: Panel, tspec: TreatmentSpec, pspec: Optional[PredictorSpec] = None,
            solver_config: Optional[SolverConfig] = None) -> ScmFit:
    """
    Fit a synthetic control for ``tspec.treated_unit``.

    Without ``pspec`` every pre-window outcome is a predictor and predictor
    weights are equal (outcome-path matching).

    Raises
    ------
    SpecError
        Fewer than two donors or two pre-window periods.
    DegenerateError
        Treated and donor outcomes are constant over the analysis windows.
    """
    cfg = solver_config or SolverConfig()
    t = tspec.resolve(panel)
    if len(t.donors) < 2:
        raise SpecError("synthetic control needs at least two donors")
    pre_idx = panel.window_indices(t.pre_window)
    if len(pre_idx) < 2:
        raise SpecError("synthetic control needs at least two pre-window periods")
    if pspec is None:
        pspec = PredictorSpec.outcome_path(t, panel)
        if cfg.v_method == "nested":
            cfg = replace(cfg, v_method="equal")
    pm = build_predictors(panel, t, pspec)
    K = len(pm.labels)

    i1 = panel.unit_index(t.treated_unit)
    idx0 = [panel.unit_index(d) for d in t.donors]
    lo = min(t.pre_window[0], t.post_window[0])
    hi = max(t.pre_window[1], t.post_window[1])
    span = panel.window_indices((lo, hi))
    rows = [i1, *idx0]
    if np.ptp(panel.outcomes[np.ix_(rows, span)]) == 0:
        raise DegenerateError("outcomes are constant across treated and donors")

    y1_pre = panel.outcomes[i1, pre_idx]
    Y0_pre = panel.outcomes[np.ix_(idx0, pre_idx)]
    scale = float(np.var(panel.outcomes[np.ix_(rows, pre_idx)]))
    if scale == 0:
        scale = float(np.var(panel.outcomes[np.ix_(rows, span)]))

    x1, X0 = pm.x_treated, pm.x_donors
    X0T = X0.T.copy()
    warm = {"w": np.full(X0.shape[1], 1.0 / X0.shape[1])}

    def loss(v):
        XV = X0T * v
        w = warm_qp(XV @ X0, XV @ x1, warm["w"], cfg.max_iter)
        warm["w"] = w
        r = y1_pre - w @ Y0_pre
        return float(r @ r) / (len(r) * scale)

    n_eval = 0
    if isinstance(cfg.v_method, str):
        if K == 1 or cfg.v_method == "equal":
            v = np.full(K, 1.0 / K)
        elif cfg.v_method == "regression":
            v = _regression_v(panel, t, pm)
        elif cfg.v_method == "nested":
            rng = child_rng(cfg.seed, 0)
            starts = [np.full(K, 1.0 / K), _regression_v(panel, t, pm)]
            while len(starts) < cfg.restarts:
                starts.append(rng.dirichlet(np.ones(K)))
            starts = starts[:max(cfg.restarts, 1)]
            starts += [np.asarray(s, float) / np.sum(s) for s in cfg.initial_v]
            v, _, n_eval = _search_v(loss, K, starts, cfg)
        else:
            raise SpecError(f"unknown v_method {cfg.v_method!r}")
    else:
        v = np.asarray(cfg.v_method, dtype=float)
        if v.shape != (K,) or np.any(v < 0) or v.sum() <= 0:
            raise SpecError("explicit predictor weights must be nonnegative, one per predictor")
        v = v / v.sum()

    w0 = None
    if cfg.initial_w:
        start = dict(cfg.initial_w)
        w0 = np.array([max(float(start.get(d, 0.0)), 0.0) for d in t.donors])
        w0 = w0 / w0.sum() if w0.sum() > 0 else None
    wv = inner_weights(x1, X0, v, cfg, donor_ids=t.donors, w0=w0)
    w = wv.w
    treated = panel.outcomes[i1, span]
    synthetic = w @ panel.outcomes[np.ix_(idx0, span)]
    gap = GapSeries(panel.periods[span].copy(), treated - synthetic)
    pre_mspe = float(np.mean(gap.window(t.pre_window) ** 2))
    report = {
        "v_method": cfg.v_method if isinstance(cfg.v_method, str) else "explicit",
        "restarts": cfg.restarts if cfg.v_method == "nested" else 0,
        "outer_evaluations": n_eval,
        "outer_objective": pre_mspe,
        "inner_objective": wv.objective,
        "standardized": pspec.standardize,
    }
    return ScmFit(weights=wv, v=PredictorWeights(v, pm.labels), treated_path=treated,
                  synthetic_path=synthetic, gap=gap, pre_mspe=pre_mspe,
                  solver_report=report, tspec=t)


def gap_series(panel: Panel, tspec: TreatmentSpec, fit: ScmFit) -> GapSeries:
    """Treated outcome minus ``fit.synthetic_path`` over the fit's periods."""
    t = tspec.resolve(panel)
    idx = np.array([panel.period_index(p) for p in fit.periods])
    treated = panel.outcomes[panel.unit_index(t.treated_unit), idx]
    return GapSeries(fit.periods.copy(), treated - fit.synthetic_path)


def effect_summary(gap: GapSeries, panel: Panel, tspec: TreatmentSpec) -> EffectSummary:
    """ATT, percentage effects, decade snapshots and optional window split."""
    t = tspec.resolve(panel)
    post = gap.window(t.post_window)
    if len(post) != t.post_window[1] - t.post_window[0] + 1:
        raise SpecError("gap series does not cover the post window")
    i1 = panel.unit_index(t.treated_unit)
    post_idx = panel.window_indices(t.post_window)
    synthetic_post = panel.outcomes[i1, post_idx] - post
    att = float(np.mean(post))
    last_pre = t.intervention_period - 1
    y_last = float(panel.outcomes[i1, panel.period_index(last_pre)]) \
        if last_pre >= panel.periods[0] else 0.0

    if att == 0:
        pct_syn, pct_last = 0.0, 0.0
    else:
        pct_syn = safe_div(att, float(np.mean(synthetic_post)))
        pct_last = safe_div(att, y_last)

    decades = {int(p): float(g) for p, g in zip(gap.periods, gap.values)
               if t.post_window[0] <= p <= t.post_window[1] and p % 10 == 0}
    split = None
    if t.split_year is not None:
        s = int(t.split_year)
        before = gap.window((t.post_window[0], s - 1))
        after = gap.window((s, t.post_window[1]))
        split = (float(np.mean(before)) if len(before) else None,
                 float(np.mean(after)) if len(after) else None)
    return EffectSummary(att, pct_syn, pct_last, decades, split,
                         split_year=t.split_year, last_pre_period=last_pre)


def balance_table(panel: Panel, tspec: TreatmentSpec, pspec: PredictorSpec,
                  fit: ScmFit) -> pd.DataFrame:
    """
    Treated, synthetic and donor-mean predictor values on the raw scale.

    Returns a frame with columns ``predictor, treated, synthetic,
    donor_mean``.
    """
    t = tspec.resolve(panel)
    pm = build_predictors(panel, t, pspec)
    w = np.array([fit.weights[d] for d in pm.donor_ids])
    return pd.DataFrame({
        "predictor": list(pm.labels),
        "treated": pm.raw_treated,
        "synthetic": pm.raw_donors @ w,
        "donor_mean": pm.raw_donors.mean(axis=1),
    })
