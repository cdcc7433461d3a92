"""
Design-based inference and robustness checks for synthetic controls.

Placebo-in-space reassigns treatment to every unit and ranks post/pre MSPE
ratios; placebo-in-time moves the intervention earlier; leave-one-out drops
one donor at a time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from counterfact._util import ordered_map
from counterfact.ascm import EstimatorConfig, fit_ascm
from counterfact.errors import ConfigError, CounterfactError, SpecError
from counterfact.panel import Panel, TreatmentSpec, build_predictors
from counterfact.scm import EffectSummary, GapSeries, ScmFit, effect_summary, fit_scm

__all__ = [
    "EstimatorConfig", "MspeRatio", "PlaceboEntry", "PlaceboEnsemble", "PermutationReport",
    "BackdateResult", "LooEntry", "LooResult", "mspe_ratio", "placebo_in_space",
    "permutation_p", "placebo_in_time", "leave_one_out",
]


class MspeRatio(NamedTuple):
    pre_mspe: float
    post_mspe: float
    ratio: float
    infinite: bool


def mspe_ratio(gap: GapSeries, tspec: TreatmentSpec) -> MspeRatio:
    """Mean squared gaps in each window and their ratio (post over pre).

    A zero pre-window MSPE gives an infinite ratio (or 0 when the post
    MSPE is also 0) with the ``infinite`` flag set.
    """
    pre = float(np.mean(gap.window(tspec.pre_window) ** 2))
    post = float(np.mean(gap.window(tspec.post_window) ** 2))
    if pre == 0:
        return MspeRatio(pre, post, math.inf if post > 0 else 0.0, True)
    return MspeRatio(pre, post, post / pre, False)


def _fit(panel: Panel, tspec: TreatmentSpec, ec: EstimatorConfig, extra_v=()):
    """Fit the configured estimator; returns (base ScmFit, synthetic path, gap)."""
    solver = ec.solver
    if extra_v:
        solver = replace(solver, initial_v=tuple(solver.initial_v) + tuple(extra_v))
    if ec.name == "scm":
        fit = fit_scm(panel, tspec, ec.pspec, solver)
        return fit, fit.synthetic_path, fit.gap
    if ec.name == "ascm":
        fit = fit_ascm(panel, tspec, ec.pspec, ec.ridge, solver)
        return fit.base, fit.corrected_path, fit.corrected_gap
    raise ConfigError(f"estimator must be 'scm' or 'ascm', got {ec.name!r}")


@dataclass
class PlaceboEntry:
    unit: str
    gap: Optional[GapSeries]
    pre_mspe: float
    post_mspe: float
    mspe_ratio: float
    infinite: bool = False
    error: Optional[str] = None


@dataclass
class PlaceboEnsemble:
    treated_id: str
    entries: List[PlaceboEntry]
    tspec: TreatmentSpec
    fit_filter: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def entry(self, unit: str) -> PlaceboEntry:
        for e in self.entries:
            if e.unit == unit:
                return e
        raise KeyError(unit)

    def gaps_frame(self) -> pd.DataFrame:
        rows = [(e.unit, int(p), float(g)) for e in self.entries if e.gap is not None
                for p, g in zip(e.gap.periods, e.gap.values)]
        return pd.DataFrame(rows, columns=["unit", "year", "gap"])

    def ratios_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit": [e.unit for e in self.entries],
                             "mspe_ratio": [e.mspe_ratio for e in self.entries]})

    def to_dict(self) -> dict:
        return {
            "treated": self.treated_id,
            "fit_filter": self.fit_filter,
            "metadata": self.metadata,
            "entries": [{"unit": e.unit, "pre_mspe": e.pre_mspe, "post_mspe": e.post_mspe,
                         "mspe_ratio": e.mspe_ratio, "infinite": e.infinite, "error": e.error}
                        for e in self.entries],
        }


def placebo_in_space(panel: Panel, tspec: TreatmentSpec,
                     estimator_config: Optional[EstimatorConfig] = None,
                     fit_filter: Optional[float] = None, workers: int = 1) -> PlaceboEnsemble:
    """
    Refit the estimator with each unit of the analysis (treated unit and its
    donors) as the treated one.

    A placebo unit's donors are the original donors minus itself; the
    originally treated unit is never a placebo donor. Failed placebo fits
    are recorded on their entry.
    """
    ec = estimator_config or EstimatorConfig()
    t = tspec.resolve(panel)
    units = [t.treated_unit] + list(t.donors)

    def one(u):
        if u == t.treated_unit:
            spec = t
        else:
            spec = replace(t, treated_unit=u, donors=tuple(d for d in t.donors if d != u))
        try:
            _, _, gap = _fit(panel, spec, ec)
        except CounterfactError as exc:
            return PlaceboEntry(u, None, math.nan, math.nan, math.nan, False,
                                f"{type(exc).__name__}: {exc}")
        m = mspe_ratio(gap, t)
        return PlaceboEntry(u, gap, m.pre_mspe, m.post_mspe, m.ratio, m.infinite)

    entries = ordered_map(one, units, workers)
    entries.sort(key=lambda e: e.unit)
    meta = {"estimator": ec.name,
            "placebo_donors": "original donors minus the placebo unit; treated unit excluded"}
    return PlaceboEnsemble(t.treated_unit, entries, t, fit_filter, meta)


@dataclass
class PermutationReport:
    rank: Optional[int]
    n_units_ranked: int
    p_value: float
    treated_ratio: float
    filtered_out: List[str] = field(default_factory=list)
    excluded_infinite: List[str] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "n_units_ranked": self.n_units_ranked,
                "p_value": self.p_value, "treated_ratio": self.treated_ratio,
                "filtered_out": self.filtered_out, "excluded_infinite": self.excluded_infinite,
                "failed": self.failed}


def permutation_p(ensemble: PlaceboEnsemble, fit_filter: Optional[float] = None) -> PermutationReport:
    """
    Rank the treated unit's MSPE ratio among the placebo ratios.

    ``p = #{units with ratio >= treated ratio} / n_ranked``; ties count
    against the treated unit. Entries with an infinite ratio or a failed fit
    are not ranked. ``fit_filter`` (or the ensemble's) drops placebos whose
    pre MSPE exceeds that multiple of the treated pre MSPE.
    """
    m = fit_filter if fit_filter is not None else ensemble.fit_filter
    treated = ensemble.entry(ensemble.treated_id)
    filtered, infinite, failed, ranked = [], [], [], []
    for e in ensemble.entries:
        if e.error is not None:
            failed.append(e.unit)
        elif e.infinite:
            infinite.append(e.unit)
        elif m is not None and e.unit != treated.unit and e.pre_mspe > m * treated.pre_mspe:
            filtered.append(e.unit)
        else:
            ranked.append(e)
    if infinite:
        warnings.warn(f"zero pre-window MSPE; excluded from ranking: {infinite}", RuntimeWarning)
    if treated.error is not None or treated.infinite:
        warnings.warn("treated unit has no finite MSPE ratio; p-value undefined", RuntimeWarning)
        return PermutationReport(None, len(ranked), math.nan, treated.mspe_ratio,
                                 filtered, infinite, failed)
    ratios = np.array([e.mspe_ratio for e in ranked])
    rank = int(np.sum(ratios >= treated.mspe_ratio))
    return PermutationReport(rank, len(ranked), rank / len(ranked), treated.mspe_ratio,
                             filtered, infinite, failed)


@dataclass
class BackdateResult:
    fit: ScmFit
    summary: EffectSummary
    tspec: TreatmentSpec
    pseudo_att: float
    pre_gap_sd: float
    full_horizon: bool = False

    def path_frame(self) -> pd.DataFrame:
        df = self.fit.paths_frame()
        df.insert(0, "pseudo_year", int(self.tspec.intervention_period))
        return df

    def to_dict(self) -> dict:
        return {"pseudo_year": int(self.tspec.intervention_period),
                "pre_window": list(self.tspec.pre_window),
                "post_window": list(self.tspec.post_window),
                "full_horizon": self.full_horizon, "pseudo_att": self.pseudo_att,
                "pre_gap_sd": self.pre_gap_sd, "fit": self.fit.to_dict(),
                "summary": self.summary.to_dict()}


def placebo_in_time(panel: Panel, tspec: TreatmentSpec, pseudo_year: int,
                    estimator_config: Optional[EstimatorConfig] = None,
                    full_horizon: bool = False) -> BackdateResult:
    """
    Refit with the intervention moved to ``pseudo_year``.

    The pseudo post window ends the year before the real intervention unless
    ``full_horizon`` is set, in which case it runs to the end of the real
    post window. ``pseudo_year`` equal to the real intervention returns the
    baseline fit.
    """
    ec = estimator_config or EstimatorConfig()
    t = tspec.resolve(panel)
    t0 = int(t.intervention_period)
    if pseudo_year > t0:
        raise SpecError("pseudo intervention must not be later than the real one")
    if pseudo_year == t0:
        pt = t
    else:
        if pseudo_year - 1 < t.pre_window[0] + 1:
            raise SpecError("too few periods before the pseudo intervention")
        end = t.post_window[1] if full_horizon else t0 - 1
        pt = TreatmentSpec(t.treated_unit, int(pseudo_year), (t.pre_window[0], int(pseudo_year) - 1),
                           (int(pseudo_year), end), donors=t.donors).resolve(panel)
    fit = fit_scm(panel, pt, ec.pspec, ec.solver)
    summary = effect_summary(fit.gap, panel, pt)
    sd = float(np.std(fit.gap.window(pt.pre_window), ddof=1))
    return BackdateResult(fit, summary, pt, summary.att, sd, full_horizon)


@dataclass
class LooEntry:
    dropped: str
    synthetic_path: Optional[np.ndarray]
    att: float
    weights: Optional[Dict[str, float]] = None
    error: Optional[str] = None


@dataclass
class LooResult:
    baseline: ScmFit
    baseline_path: np.ndarray
    entries: List[LooEntry]

    @property
    def periods(self) -> np.ndarray:
        return self.baseline.periods

    def envelope(self) -> pd.DataFrame:
        paths = [self.baseline_path] + [e.synthetic_path for e in self.entries
                                        if e.synthetic_path is not None]
        P = np.vstack(paths)
        return pd.DataFrame({"year": self.periods, "baseline": self.baseline_path,
                             "lower": P.min(axis=0), "upper": P.max(axis=0)})

    def paths_frame(self) -> pd.DataFrame:
        rows = [(e.dropped, int(p), float(s)) for e in self.entries if e.synthetic_path is not None
                for p, s in zip(self.periods, e.synthetic_path)]
        return pd.DataFrame(rows, columns=["dropped_unit", "year", "synthetic"])

    def to_dict(self) -> dict:
        return {"baseline_weights": self.baseline.weights.as_dict(),
                "entries": [{"dropped": e.dropped, "att": e.att, "weights": e.weights,
                             "error": e.error} for e in self.entries]}


def leave_one_out(panel: Panel, tspec: TreatmentSpec,
                  estimator_config: Optional[EstimatorConfig] = None,
                  workers: int = 1, reestimate_v: bool = False) -> LooResult:
    """
    Refit once per donor with that donor removed.

    By default each refit keeps the baseline predictor metric (predictor
    weights and standardization scales) and starts its donor-weight solve
    from the baseline weights, so only the donor set changes and removing a
    donor the baseline does not use reproduces the baseline. With ``reestimate_v`` the predictor
    weights are searched again (starting from the baseline solution), which
    can move the fit even when the dropped donor had zero weight. The
    envelope spans the baseline and all refits.
    """
    ec = estimator_config or EstimatorConfig()
    t = tspec.resolve(panel)
    if len(t.donors) < 3:
        raise SpecError("leave-one-out needs at least 3 donors")
    base, base_path, _ = _fit(panel, t, ec)
    post = (base.periods >= t.post_window[0]) & (base.periods <= t.post_window[1])

    if reestimate_v:
        refit_ec, extra = ec, (tuple(base.v.v),)
    else:
        # keep the baseline predictor metric: standardization depends on the
        # donor set, so fold the baseline scales into the weights and refit
        # on raw predictors. Starting from the baseline donor weights makes
        # ties among optimal weight vectors resolve toward the baseline.
        v, pspec = base.v.v, ec.pspec
        if pspec is not None and pspec.standardize:
            pm = build_predictors(panel, t, pspec)
            var = np.column_stack([pm.raw_treated, pm.raw_donors]).var(axis=1)
            v = np.divide(v, var, out=np.zeros_like(v), where=var > 0)
            v = v / v.sum() if v.sum() > 0 else base.v.v
            pspec = replace(pspec, standardize=False)
        solver = replace(ec.solver, v_method=tuple(v),
                         initial_w=tuple(base.weights.as_dict().items()))
        refit_ec, extra = replace(ec, pspec=pspec, solver=solver), ()

    def one(d):
        spec = t.with_donors([x for x in t.donors if x != d])
        try:
            fit, path, gap = _fit(panel, spec, refit_ec, extra_v=extra)
        except CounterfactError as exc:
            return LooEntry(d, None, math.nan, None, f"{type(exc).__name__}: {exc}")
        return LooEntry(d, path, float(np.mean(gap.values[post])), fit.weights.as_dict())

    return LooResult(base, base_path, ordered_map(one, list(t.donors), workers))
