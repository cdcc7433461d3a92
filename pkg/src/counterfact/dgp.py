"""
Simulated panels with known treatment effects.

Outcomes follow an interactive fixed-effects model

    Y_it(0) = a_i + b_t + lambda_i' f_t + e_it

with unit ``unit_00`` treated from period index ``t0`` onward. The effect
path is added to the treated unit's post-period outcomes and the untreated
potential outcomes are kept in a :class:`TruthRecord`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from counterfact._util import as_list, child_rng, ordered_map
from counterfact.errors import ConfigError, CounterfactError
from counterfact.panel import Panel, TreatmentSpec

TREATED_ID = "unit_00"


@dataclass(frozen=True)
class DgpSpec:
    """
    Parameters
    ----------
    n_units, n_periods : int
        Panel dimensions; ``n_units`` includes the treated unit.
    t0 : int
        Index (0-based) of the first treated period.
    rank : int
        Number of latent factors.
    effect_path : float, sequence or mapping
        A number gives a constant effect; a sequence of length
        ``n_periods - t0`` is used as is; ``{"ramp": s}`` gives
        ``s, 2s, 3s, ...``.
    hull_safe : bool
        Build the treated unit's loadings and unit effect as a convex
        combination of the donors' (``treated_weights`` or a Dirichlet
        draw), so its noiseless untreated path lies in the donor hull.
    """

    n_units: int = 21
    n_periods: int = 40
    t0: int = 25
    rank: int = 2
    factor_scale: float = 1.0
    loading_scale: float = 1.0
    noise_sd: float = 0.5
    unit_fe_sd: float = 1.0
    time_fe_sd: float = 1.0
    effect_path: Union[float, Sequence[float], Dict[str, float]] = 0.0
    seed: int = 0
    hull_safe: bool = False
    treated_weights: Optional[Tuple[float, ...]] = None
    start_year: int = 1900

    def __post_init__(self):
        if self.n_units < 3:
            raise ConfigError("a simulated panel needs at least 3 units")
        if not 1 <= self.t0 < self.n_periods:
            raise ConfigError("t0 must leave at least one pre and one post period")
        if self.rank < 0 or self.rank >= min(self.n_units, self.n_periods):
            raise ConfigError("rank must be nonnegative and below min(n_units, n_periods)")
        for name in ("factor_scale", "loading_scale", "noise_sd", "unit_fe_sd", "time_fe_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.treated_weights is not None and len(self.treated_weights) > self.n_units - 1:
            raise ConfigError("more treated weights than donors")
        self.effects()

    @property
    def n_post(self) -> int:
        return self.n_periods - self.t0

    def effects(self) -> np.ndarray:
        e = self.effect_path
        if isinstance(e, dict):
            if set(e) != {"ramp"}:
                raise ConfigError("effect_path mapping must be {'ramp': slope}")
            return float(e["ramp"]) * np.arange(1, self.n_post + 1)
        if np.ndim(e) == 0:
            return np.full(self.n_post, float(e))
        e = np.asarray(e, dtype=float)
        if e.shape != (self.n_post,):
            raise ConfigError(f"effect_path needs {self.n_post} values, got {len(e)}")
        return e

    def with_seed(self, seed: int) -> "DgpSpec":
        return replace(self, seed=int(seed))

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        d = dict(d)
        if d.get("treated_weights") is not None:
            d["treated_weights"] = tuple(d["treated_weights"])
        if isinstance(d.get("effect_path"), list):
            d["effect_path"] = tuple(d["effect_path"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DGP fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["effect_path"], tuple):
            d["effect_path"] = list(d["effect_path"])
        return d


@dataclass
class TruthRecord:
    treated_unit: str
    intervention_period: int
    periods: np.ndarray
    true_effect_path: np.ndarray
    untreated_potential: np.ndarray
    noiseless_untreated: np.ndarray
    treated_weights: Optional[np.ndarray] = None

    @property
    def true_att(self) -> float:
        return float(np.mean(self.true_effect_path))

    def treatment_spec(self, **kwargs) -> TreatmentSpec:
        return TreatmentSpec(self.treated_unit, self.intervention_period, **kwargs)

    def to_dict(self) -> dict:
        return {
            "treated_unit": self.treated_unit,
            "intervention_period": self.intervention_period,
            "true_att": self.true_att,
            "true_effect_path": as_list(self.true_effect_path),
            "untreated_potential": as_list(self.untreated_potential),
            "treated_weights": None if self.treated_weights is None else as_list(self.treated_weights),
        }


def generate_panel(spec: DgpSpec) -> Tuple[Panel, TruthRecord]:
    """Draw a panel and its truth record; bit-identical for equal specs."""
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 7]))
    N, T, r = spec.n_units, spec.n_periods, spec.rank
    F = spec.factor_scale * rng.standard_normal((T, r))
    lam = spec.loading_scale * rng.standard_normal((N, r))
    a = spec.unit_fe_sd * rng.standard_normal(N)
    b = spec.time_fe_sd * rng.standard_normal(T)
    noise = spec.noise_sd * rng.standard_normal((N, T))
    weights = None
    if spec.hull_safe:
        if spec.treated_weights is not None:
            weights = np.zeros(N - 1)
            weights[:len(spec.treated_weights)] = spec.treated_weights
            weights = weights / weights.sum()
        else:
            weights = rng.dirichlet(np.ones(N - 1))
        lam[0] = weights @ lam[1:]
        a[0] = weights @ a[1:]
    clean = a[:, None] + b[None, :] + lam @ F.T
    Y0 = clean + noise
    effects = spec.effects()
    Y = Y0.copy()
    Y[0, spec.t0:] += effects
    periods = spec.start_year + np.arange(T)
    units = [f"unit_{i:02d}" for i in range(N)]
    panel = Panel(units, periods, Y)
    truth = TruthRecord(TREATED_ID, int(periods[spec.t0]), periods, effects, Y0[0].copy(),
                        clean[0].copy(), weights)
    return panel, truth


ESTIMATORS = ("scm", "ascm", "sdid", "ife", "mc")


@dataclass
class RecoveryReport:
    """Per-estimator recovery statistics over seeded replications."""

    spec: DgpSpec
    n_reps: int
    seed: int
    alpha: float
    rows: Dict[str, dict] = field(default_factory=dict)
    estimates: Dict[str, List[Optional[float]]] = field(default_factory=dict)
    selected: Dict[str, List[Optional[float]]] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_dict(self.rows, orient="index").rename_axis("estimator").reset_index()

    def to_csv(self, path=None):
        return self.frame().to_csv(path, index=False, float_format="%.10g")

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "n_reps": self.n_reps, "seed": self.seed,
                "alpha": self.alpha, "summary": self.rows, "estimates": self.estimates,
                "selected": self.selected}


def _run_one(name, panel, tspec, inference, alpha, seed, n_inference_reps):
    """Returns (att, (lo, hi) or None, p or None, selected tuning value)."""
    from counterfact import ascm, factor, inference as inf, scm, sdid

    if name == "scm":
        fit = scm.fit_scm(panel, tspec)
        att = float(np.mean(fit.gap.window(tspec.resolve(panel).post_window)))
        p = None
        if inference:
            ens = inf.placebo_in_space(panel, tspec, inf.EstimatorConfig(name="scm"))
            p = inf.permutation_p(ens).p_value
        return att, None, p, None
    if name == "ascm":
        fit = ascm.fit_ascm(panel, tspec)
        ci = p = None
        if inference:
            res = ascm.conformal_interval(panel, tspec, alpha=alpha, seed=seed)
            ci = res.interval
            p = float(np.interp(0.0, res.grid, res.p_values)) if res.grid[0] <= 0 <= res.grid[-1] else 0.0
        return fit.att, ci, p, fit.ridge_penalty
    if name == "sdid":
        fit = sdid.fit_sdid(panel, tspec)
        ci = p = None
        if inference:
            res = sdid.sdid_inference(panel, tspec, fit, n_reps=n_inference_reps, seed=seed)
            ci, p = res.ci, res.p_value
        return fit.tau_hat, ci, p, None
    if name == "ife":
        fit = factor.fit_ife(panel, tspec, seed=seed)
    elif name == "mc":
        fit = factor.fit_matrix_completion(panel, tspec, seed=seed)
    else:
        raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    ci = p = None
    if inference:
        res = factor.factor_inference(panel, tspec, fit, n_reps=n_inference_reps, seed=seed)
        ci, p = res.ci, res.p_value
    tuning = fit.rank if name == "ife" else fit.lambda_nn
    return fit.att, ci, p, tuning


def recovery_experiment(spec: DgpSpec, estimators: Sequence[str] = ("scm",), n_reps: int = 100,
                        seed: int = 0, inference: bool = False, alpha: float = 0.1,
                        n_inference_reps: int = 200, workers: int = 1) -> RecoveryReport:
    """
    Run each estimator on ``n_reps`` panels drawn with per-replication seeds.

    Bias and RMSE compare the estimated ATT with the true ATT. With
    ``inference`` set, coverage counts intervals containing the true ATT and
    the rejection rate counts p-values (for the null of zero effect) at or
    below ``alpha``. Estimator failures are counted, not raised.
    """
    if n_reps < 50:
        raise ConfigError("recovery experiments need n_reps >= 50")
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")

    def rep(i):
        rep_seed = int(child_rng(seed, i).integers(2 ** 31))
        panel, truth = generate_panel(spec.with_seed(rep_seed))
        tspec = truth.treatment_spec()
        out = {}
        for name in estimators:
            try:
                out[name] = _run_one(name, panel, tspec, inference, alpha, rep_seed, n_inference_reps)
            except CounterfactError as exc:
                out[name] = exc
        return truth.true_att, out

    results = ordered_map(rep, range(n_reps), workers)
    report = RecoveryReport(spec, n_reps, seed, alpha)
    for name in estimators:
        atts, covers, rejects, tuned = [], [], [], []
        failures = 0
        for true_att, out in results:
            r = out[name]
            if isinstance(r, Exception):
                failures += 1
                atts.append(None)
                tuned.append(None)
                continue
            att, ci, p, tuning = r
            atts.append(att)
            tuned.append(None if tuning is None else float(tuning))
            if ci is not None:
                covers.append(ci[0] <= true_att <= ci[1])
            if p is not None:
                rejects.append(p <= alpha)
        err = np.array([a - t for a, (t, _) in zip(atts, results) if a is not None])
        report.rows[name] = {
            "n_ok": int(len(err)),
            "failures": failures,
            "bias": float(err.mean()) if len(err) else math.nan,
            "rmse": float(np.sqrt(np.mean(err ** 2))) if len(err) else math.nan,
            "coverage": float(np.mean(covers)) if covers else math.nan,
            "rejection_rate": float(np.mean(rejects)) if rejects else math.nan,
        }
        report.estimates[name] = atts
        report.selected[name] = tuned
    return report
