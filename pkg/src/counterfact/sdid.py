"""
Synthetic difference-in-differences.

Unit weights match donor pre-trends to the treated pre-trend up to an
intercept, with a ridge penalty; time weights match pre-period donor
outcomes to their post-period averages, again up to an intercept. The
effect is the weighted two-way fixed-effects coefficient on the treatment
indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from counterfact._util import as_list, child_rng, ordered_map
from counterfact.errors import ConfigError, DegenerateError, SpecError
from counterfact.panel import Panel, TreatmentSpec
from counterfact.simplex import solve_simplex_qp


@dataclass(frozen=True)
class SdidConfig:
    """
    ``zeta`` overrides the unit-weight penalty; by default it is
    ``(n_treated_cells) ** 0.25`` times the standard deviation of first
    differences of donor pre-window outcomes. ``uniform_units`` /
    ``uniform_times`` force equal weights (plain difference-in-differences).
    """

    zeta: Optional[float] = None
    zeta_time_factor: float = 1e-6
    uniform_units: bool = False
    uniform_times: bool = False
    max_iter: int = 10000
    tol: float = 1e-10


@dataclass
class SdidFit:
    donor_ids: Tuple[str, ...]
    unit_weights: np.ndarray
    pre_periods: np.ndarray
    time_weights: np.ndarray
    post_periods: np.ndarray
    tau_hat: float
    dynamic: np.ndarray
    zeta: float
    noise_scale: float
    unit_intercept: float
    time_intercept: float
    tspec: Optional[TreatmentSpec] = None

    def dynamic_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"year": self.post_periods, "effect": self.dynamic})

    def to_dict(self) -> dict:
        return {
            "estimator": "SDID",
            "tau_hat": self.tau_hat,
            "unit_weights": dict(zip(self.donor_ids, as_list(self.unit_weights))),
            "time_weights": dict(zip((str(int(p)) for p in self.pre_periods),
                                     as_list(self.time_weights))),
            "dynamic": dict(zip((str(int(p)) for p in self.post_periods), as_list(self.dynamic))),
            "zeta": self.zeta,
            "zeta_rule": "(treated cells)^(1/4) x sd of donor pre-window first differences",
            "noise_scale": self.noise_scale,
        }


def _noise_scale(Y0_pre: np.ndarray) -> float:
    d = np.diff(Y0_pre, axis=1)
    return float(np.std(d, ddof=1)) if d.size >= 2 else 0.0


def _intercept_simplex_fit(A: np.ndarray, b: np.ndarray, penalty: float, cfg: SdidConfig):
    """
    ``min_{c, w in simplex} ||c + A'w - b||^2 + penalty ||w||^2``; the
    intercept is profiled out by centering the columns of ``A`` and ``b``.
    Returns ``(w, c)``.
    """
    n = A.shape[0]
    if n == 1:
        w = np.ones(1)
    else:
        Ac = A - A.mean(axis=1, keepdims=True)
        bc = b - b.mean()
        H = 2.0 * (Ac @ Ac.T + penalty * np.eye(n))
        w = solve_simplex_qp(H, 2.0 * Ac @ bc, max_iter=cfg.max_iter, tol=cfg.tol).w
    c = float(np.mean(b - A.T @ w))
    return w, c


def sdid_arrays(y1: np.ndarray, Y0: np.ndarray, n_pre: int, config: Optional[SdidConfig] = None):
    """
    Core estimator on arrays.

    Parameters
    ----------
    y1 : ndarray of shape (T,)
        Treated outcomes, pre periods first.
    Y0 : ndarray of shape (J, T)
        Donor outcomes.
    n_pre : int
        Number of leading pre-treatment periods.

    Returns
    -------
    dict with ``omega``, ``lam``, ``tau``, ``dynamic``, ``zeta``,
    ``noise_scale``, ``omega0``, ``lambda0``.
    """
    cfg = config or SdidConfig()
    J, T = Y0.shape
    n_post = T - n_pre
    pre, post = Y0[:, :n_pre], Y0[:, n_pre:]
    sigma = _noise_scale(pre)
    zeta = cfg.zeta if cfg.zeta is not None else (1.0 * n_post) ** 0.25 * sigma
    if cfg.uniform_units:
        omega = np.full(J, 1.0 / J)
        omega0 = float(np.mean(y1[:n_pre] - omega @ pre))
    else:
        omega, omega0 = _intercept_simplex_fit(pre, y1[:n_pre], zeta ** 2 * n_pre, cfg)
    if cfg.uniform_times:
        lam = np.full(n_pre, 1.0 / n_pre)
        lambda0 = float(np.mean(post.mean(axis=1) - pre @ lam))
    else:
        zeta_t = cfg.zeta_time_factor * sigma
        lam, lambda0 = _intercept_simplex_fit(pre.T, post.mean(axis=1), zeta_t ** 2 * J, cfg)
    dynamic = (y1[n_pre:] - lam @ y1[:n_pre]) - (post - (pre @ lam)[:, None]).T @ omega
    tau = weighted_twfe(y1, Y0, n_pre, omega, lam)
    return {"omega": omega, "lam": lam, "tau": tau, "dynamic": dynamic, "zeta": float(zeta),
            "noise_scale": sigma, "omega0": omega0, "lambda0": lambda0}


def weighted_twfe(y1, Y0, n_pre, omega, lam) -> float:
    """
    Treatment coefficient of the weighted regression
    ``Y_it = a_i + b_t + tau D_it`` with weights ``omega_i * lambda_t``;
    the treated unit has weight 1 and post periods ``1 / T_post``.
    """
    J, T = Y0.shape
    n_post = T - n_pre
    uw = np.concatenate([[1.0], omega])
    tw = np.concatenate([lam, np.full(n_post, 1.0 / n_post)])
    keep_u = np.flatnonzero(uw > 0)
    keep_t = np.flatnonzero(tw > 0)
    Y = np.vstack([y1, Y0])[np.ix_(keep_u, keep_t)]
    nu, nt = len(keep_u), len(keep_t)
    ui, ti = np.meshgrid(np.arange(nu), np.arange(nt), indexing="ij")
    ui, ti = ui.ravel(), ti.ravel()
    X = np.zeros((nu * nt, nu + nt))
    X[np.arange(nu * nt), ui] = 1.0
    # the last time dummy is dropped for identification
    has_t = ti < nt - 1
    X[np.flatnonzero(has_t), nu + ti[has_t]] = 1.0
    X[:, -1] = ((ui == 0) & (keep_t[ti] >= n_pre)).astype(float)
    sw = np.sqrt(uw[keep_u][ui] * tw[keep_t][ti])
    coef = np.linalg.lstsq(X * sw[:, None], Y.ravel() * sw, rcond=None)[0]
    return float(coef[-1])


def _arrays(panel: Panel, t: TreatmentSpec, donors=None):
    donors = list(t.donors if donors is None else donors)
    cols = np.concatenate([panel.window_indices(t.pre_window), panel.window_indices(t.post_window)])
    y1 = panel.outcomes[panel.unit_index(t.treated_unit), cols]
    Y0 = panel.outcomes[np.ix_([panel.unit_index(d) for d in donors], cols)]
    return y1, Y0


def fit_sdid(panel: Panel, tspec: TreatmentSpec, reg_config: Optional[SdidConfig] = None) -> SdidFit:
    """
    Fit synthetic difference-in-differences.

    A single pre period or a single donor is accepted; the corresponding
    weights are then trivially 1 and the estimate reduces accordingly.

    Raises
    ------
    DegenerateError
        All donor outcomes are equal to one constant.
    """
    t = tspec.resolve(panel)
    if len(t.donors) < 1:
        raise SpecError("SDID needs at least one donor")
    y1, Y0 = _arrays(panel, t)
    if np.ptp(Y0) == 0:
        raise DegenerateError("donor outcomes are constant; SDID weights are undefined")
    pre = panel.periods[panel.window_indices(t.pre_window)]
    post = panel.periods[panel.window_indices(t.post_window)]
    r = sdid_arrays(y1, Y0, len(pre), reg_config)
    return SdidFit(tuple(t.donors), r["omega"], pre, r["lam"], post, r["tau"], r["dynamic"],
                   r["zeta"], r["noise_scale"], r["omega0"], r["lambda0"], t)


@dataclass
class SdidInference:
    estimate: float
    se: float
    ci: Tuple[float, float]
    p_value: float
    method: str
    replications: int
    dynamic_se: np.ndarray = field(default_factory=lambda: np.zeros(0))
    replicate_estimates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failures: int = 0
    level: float = 0.95

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "ci": list(self.ci),
                "p_value": self.p_value, "method": self.method,
                "replications": self.replications, "failures": self.failures,
                "level": self.level, "dynamic_se": as_list(self.dynamic_se)}


def normal_inference(estimate: float, se: float, level: float = 0.95,
                     scale: float = 1.0) -> Tuple[Tuple[float, float], float]:
    """Normal-reference interval and two-sided p-value.

    An SE that is zero up to rounding (below ``1e-12 * scale``) gives a
    p-value of 1 for a numerically zero estimate and 0 otherwise.
    """
    z = stats.norm.ppf(0.5 + level / 2.0)
    ci = (float(estimate - z * se), float(estimate + z * se))
    if se > 1e-12 * max(scale, 1e-300):
        p = float(2.0 * stats.norm.sf(abs(estimate) / se))
    else:
        p = 1.0 if abs(estimate) <= 1e-10 * max(scale, 1e-300) else 0.0
    return ci, p


def sdid_inference(panel: Panel, tspec: TreatmentSpec, fit: SdidFit, method: str = "placebo",
                   n_reps: int = 1000, seed: int = 0, reg_config: Optional[SdidConfig] = None,
                   workers: int = 1, level: float = 0.95) -> SdidInference:
    """
    Placebo or bootstrap standard error for an SDID estimate.

    ``placebo`` reassigns treatment to donors (every donor once when there
    are at most ``n_reps`` of them, otherwise a seeded subsample of size
    ``n_reps``) and refits on the remaining donors; the original treated
    unit never serves as a control. ``bootstrap`` resamples donors with
    replacement, keeping the treated unit. SE is the replicate standard
    deviation (population form); CI and p-value use the normal reference.
    """
    if n_reps < 50:
        raise ConfigError("n_reps must be at least 50")
    t = tspec.resolve(panel)
    y1, Y0 = _arrays(panel, t)
    J = Y0.shape[0]
    n_pre = len(fit.pre_periods)

    if method == "placebo":
        if J < 2:
            raise ConfigError("placebo inference needs at least 2 donors")
        if J <= n_reps:
            chosen = np.arange(J)
        else:
            chosen = np.sort(child_rng(seed, 0).choice(J, size=n_reps, replace=False))

        def replicate(k):
            j = int(chosen[k])
            rest = np.delete(np.arange(J), j)
            return sdid_arrays(Y0[j], Y0[rest], n_pre, reg_config)

        tasks = range(len(chosen))
    elif method == "bootstrap":
        def replicate(k):
            rng = child_rng(seed, k)
            idx = rng.integers(J, size=J)
            return sdid_arrays(y1, Y0[idx], n_pre, reg_config)

        tasks = range(n_reps)
    else:
        raise ConfigError(f"unknown SDID inference method {method!r}")

    def safe(k):
        try:
            return replicate(k)
        except (DegenerateError, np.linalg.LinAlgError):
            return None

    reps = [r for r in ordered_map(safe, tasks, workers) if r is not None]
    failures = len(tasks) - len(reps)
    if len(reps) < 2:
        raise DegenerateError("too few successful replicates for a standard error")
    taus = np.array([r["tau"] for r in reps])
    dyn = np.array([r["dynamic"] for r in reps])
    se = float(np.std(taus))
    ci, p = normal_inference(fit.tau_hat, se, level, scale=float(np.abs(Y0).max()))
    return SdidInference(fit.tau_hat, se, ci, p, method, len(reps), dyn.std(axis=0), taus,
                         failures, level)


def sdid_dynamic(fit: SdidFit, inference: Optional[SdidInference] = None) -> pd.DataFrame:
    """Per-post-period effects with pointwise normal intervals (NaN without inference)."""
    df = fit.dynamic_frame()
    if inference is None or len(inference.dynamic_se) != len(df):
        df["ci_lo"] = np.nan
        df["ci_hi"] = np.nan
        return df
    z = stats.norm.ppf(0.5 + inference.level / 2.0)
    df["ci_lo"] = df["effect"] - z * inference.dynamic_se
    df["ci_hi"] = df["effect"] + z * inference.dynamic_se
    return df
