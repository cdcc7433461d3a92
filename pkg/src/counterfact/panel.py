"""
Balanced panel container, CSV ingestion and predictor construction.

Every estimator in the package reads a :class:`Panel`: a dense unit x period
outcome matrix plus optional covariate matrices of the same shape. Units are
sorted lexicographically at load time and every weight vector indexes against
that ordering.
"""

from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from counterfact.errors import BalanceError, DomainError, FormatError, SpecError

Window = Tuple[int, int]

DEFAULT_SCHEMA = {"unit": "unit", "period": "year", "outcome": "outcome", "covariates": []}
OUTCOME_SCALES = ("level", "log")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """
    Balanced unit x period panel.

    Parameters
    ----------
    units : sequence of str
        Unit identifiers, unique. Stored in lexicographic order.
    periods : sequence of int
        Consecutive integer periods (years).
    outcomes : ndarray of shape (n_units, n_periods)
        Outcome matrix on the declared ``outcome_scale``.
    covariates : dict of str -> ndarray
        Each value has the same shape as ``outcomes``.
    outcome_scale : {"level", "log"}
    """

    units: Tuple[str, ...]
    periods: np.ndarray
    outcomes: np.ndarray
    covariates: Dict[str, np.ndarray] = field(default_factory=dict)
    outcome_scale: str = "level"

    def __post_init__(self):
        units = tuple(str(u) for u in self.units)
        if len(set(units)) != len(units):
            raise FormatError("unit identifiers must be unique")
        periods = np.asarray(self.periods)
        if periods.ndim != 1 or len(periods) == 0:
            raise FormatError("periods must be a non-empty 1-d sequence")
        if not np.all(np.equal(np.mod(periods, 1), 0)):
            raise FormatError("periods must be integers")
        periods = periods.astype(int)
        if np.any(np.diff(periods) != 1):
            raise FormatError("periods must be strictly increasing consecutive integers")
        Y = np.asarray(self.outcomes, dtype=float)
        if Y.shape != (len(units), len(periods)):
            raise FormatError(f"outcomes shape {Y.shape} does not match "
                              f"{len(units)} units x {len(periods)} periods")
        if self.outcome_scale not in OUTCOME_SCALES:
            raise FormatError(f"outcome_scale must be one of {OUTCOME_SCALES}")
        if not np.all(np.isfinite(Y)):
            bad = np.argwhere(~np.isfinite(Y))
            raise BalanceError([(units[i], int(periods[t])) for i, t in bad])

        order = np.argsort(np.array(units, dtype=object), kind="stable")
        units = tuple(units[i] for i in order)
        covs = {}
        for name, M in dict(self.covariates).items():
            M = np.asarray(M, dtype=float)
            if M.shape != Y.shape:
                raise FormatError(f"covariate {name!r} has shape {M.shape}, expected {Y.shape}")
            if not np.all(np.isfinite(M)):
                bad = np.argwhere(~np.isfinite(M))
                raise BalanceError([(self.units[i], int(periods[t])) for i, t in bad])
            covs[str(name)] = _frozen(M[order])
        p = periods.copy()
        p.setflags(write=False)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "periods", p)
        object.__setattr__(self, "outcomes", _frozen(Y[order]))
        object.__setattr__(self, "covariates", covs)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def unit_index(self, unit: str) -> int:
        try:
            return self.units.index(str(unit))
        except ValueError:
            raise SpecError(f"unit {unit!r} not in panel") from None

    def period_index(self, period: int) -> int:
        i = int(period) - int(self.periods[0])
        if not 0 <= i < self.n_periods:
            raise SpecError(f"period {period} outside panel range "
                            f"{self.periods[0]}-{self.periods[-1]}")
        return i

    def window_indices(self, window: Window) -> np.ndarray:
        lo, hi = window
        return np.arange(self.period_index(lo), self.period_index(hi) + 1)

    def series(self, unit: str) -> np.ndarray:
        return self.outcomes[self.unit_index(unit)]

    def with_outcomes(self, outcomes: np.ndarray) -> "Panel":
        """Copy of the panel with a replaced outcome matrix (same unit order)."""
        return Panel(self.units, self.periods, outcomes, self.covariates, self.outcome_scale)

    def subset(self, units: Sequence[str]) -> "Panel":
        """Restrict the panel to ``units``."""
        idx = [self.unit_index(u) for u in units]
        return Panel([self.units[i] for i in idx], self.periods, self.outcomes[idx],
                     {k: v[idx] for k, v in self.covariates.items()}, self.outcome_scale)

    def to_frame(self, schema: Optional[dict] = None) -> pd.DataFrame:
        """Long-format frame with one row per (unit, period)."""
        s = {**DEFAULT_SCHEMA, **(schema or {})}
        n, t = self.outcomes.shape
        data = {
            s["unit"]: np.repeat(np.array(self.units, dtype=object), t),
            s["period"]: np.tile(self.periods, n),
            s["outcome"]: self.outcomes.ravel(),
        }
        for name, M in self.covariates.items():
            data[name] = M.ravel()
        return pd.DataFrame(data)

    def to_csv(self, path=None, schema: Optional[dict] = None):
        """
        Write the panel in the long CSV format read by :func:`load_panel`.

        Outcomes are written on the stored scale; reload a log-scale panel
        with ``assume_transformed=True``. Returns the CSV text when ``path``
        is None.
        """
        text = self.to_frame(schema).to_csv(index=False, float_format="%.17g",
                                            lineterminator="\n")
        if path is None:
            return text
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return None


def load_panel(source, schema: Optional[dict] = None, outcome_scale: str = "level",
               assume_transformed: bool = False) -> Panel:
    """
    Read a long-format CSV into a balanced :class:`Panel`.

    Parameters
    ----------
    source : path, bytes, str or file-like
        UTF-8 CSV with a header row. A ``str`` is treated as a path when it
        names an existing file, otherwise as CSV text.
    schema : dict, optional
        Column names: ``unit``, ``period``, ``outcome`` and a list of
        ``covariates``. Missing keys fall back to ``unit,year,outcome``.
    outcome_scale : {"level", "log"}
        ``"log"`` stores the natural log of the outcome column.
    assume_transformed : bool
        The outcome column is already on ``outcome_scale`` (used when
        reloading a panel written by :meth:`Panel.to_csv`).

    Raises
    ------
    FormatError
        Unreadable CSV, missing columns, non-integer periods or duplicate
        (unit, period) rows.
    BalanceError
        One or more (unit, period) cells are missing.
    DomainError
        Non-positive outcomes under ``outcome_scale="log"``.
    """
    s = {**DEFAULT_SCHEMA, **(schema or {})}
    covariates = list(s.get("covariates") or [])
    if outcome_scale not in OUTCOME_SCALES:
        raise FormatError(f"outcome_scale must be one of {OUTCOME_SCALES}")

    if isinstance(source, (bytes, bytearray)):
        handle = io.BytesIO(source)
    elif isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        handle = source
    elif isinstance(source, str):
        handle = io.StringIO(source)
    else:
        handle = source
    try:
        df = pd.read_csv(handle, dtype={s["unit"]: str}, encoding="utf-8",
                         float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise FormatError(f"could not parse CSV: {exc}") from exc

    needed = [s["unit"], s["period"], s["outcome"], *covariates]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise FormatError(f"CSV lacks columns {missing}")

    period = pd.to_numeric(df[s["period"]], errors="coerce")
    if period.isna().any() or not np.all(np.mod(period, 1) == 0):
        raise FormatError(f"column {s['period']!r} must hold integer periods")
    df = df.assign(**{s["period"]: period.astype(int)})
    for col in [s["outcome"], *covariates]:
        num = pd.to_numeric(df[col], errors="coerce")
        if (num.isna() & df[col].notna()).any():
            raise FormatError(f"column {col!r} has non-numeric entries")
        df[col] = num

    dup = df.duplicated([s["unit"], s["period"]], keep=False)
    if dup.any():
        pairs = df.loc[dup, [s["unit"], s["period"]]].drop_duplicates()
        shown = ", ".join(f"({u}, {p})" for u, p in pairs.itertuples(index=False))
        raise FormatError(f"duplicate (unit, period) rows: {shown}")

    units = sorted(df[s["unit"]].unique())
    periods = np.arange(df[s["period"]].min(), df[s["period"]].max() + 1)
    full = pd.MultiIndex.from_product([units, periods], names=[s["unit"], s["period"]])
    wide = df.set_index([s["unit"], s["period"]]).reindex(full)
    gap_mask = wide[[s["outcome"], *covariates]].isna().any(axis=1)
    if gap_mask.any():
        raise BalanceError([(u, int(p)) for u, p in wide.index[gap_mask]])

    shape = (len(units), len(periods))
    Y = wide[s["outcome"]].to_numpy(dtype=float).reshape(shape)
    if outcome_scale == "log" and not assume_transformed:
        if np.any(Y <= 0):
            i, t = np.argwhere(Y <= 0)[0]
            raise DomainError(f"log scale needs positive outcomes; got {Y[i, t]} "
                              f"at ({units[i]}, {periods[t]})")
        Y = np.log(Y)
    covs = {c: wide[c].to_numpy(dtype=float).reshape(shape) for c in covariates}
    return Panel(units, periods, Y, covs, outcome_scale)


@dataclass(frozen=True)
class TreatmentSpec:
    """
    Treated unit, intervention period and analysis windows.

    ``pre_window`` defaults to every period before ``intervention_period``
    and ``post_window`` to every period from it onward. ``donors`` restricts
    the donor pool; by default every other unit is a donor.
    """

    treated_unit: str
    intervention_period: int
    pre_window: Optional[Window] = None
    post_window: Optional[Window] = None
    split_year: Optional[int] = None
    donors: Optional[Tuple[str, ...]] = None

    def resolve(self, panel: Panel) -> "TreatmentSpec":
        """Fill default windows and check the spec against ``panel``."""
        panel.unit_index(self.treated_unit)
        t0 = int(self.intervention_period)
        first, last = int(panel.periods[0]), int(panel.periods[-1])
        pre = tuple(int(x) for x in (self.pre_window or (first, t0 - 1)))
        post = tuple(int(x) for x in (self.post_window or (t0, last)))
        for name, (lo, hi) in (("pre_window", pre), ("post_window", post)):
            if lo > hi:
                raise SpecError(f"{name} {lo}-{hi} is empty")
            if lo < first or hi > last:
                raise SpecError(f"{name} {lo}-{hi} outside panel range {first}-{last}")
        if pre[1] >= t0:
            raise SpecError(f"pre_window must end before the intervention period {t0}")
        if post[0] < t0:
            raise SpecError(f"post_window must start at or after {t0}")
        if self.donors is None:
            donors = tuple(u for u in panel.units if u != str(self.treated_unit))
        else:
            donors = tuple(sorted(str(d) for d in self.donors))
            for d in donors:
                panel.unit_index(d)
            if str(self.treated_unit) in donors:
                raise SpecError("treated unit cannot be its own donor")
        if not donors:
            raise SpecError("donor pool is empty")
        return replace(self, treated_unit=str(self.treated_unit), intervention_period=t0,
                       pre_window=pre, post_window=post, donors=donors)

    def with_donors(self, donors: Sequence[str]) -> "TreatmentSpec":
        return replace(self, donors=tuple(donors))


@dataclass(frozen=True)
class PredictorSpec:
    """
    Which pre-intervention quantities enter the synthetic-control match.

    Parameters
    ----------
    outcome_lags : sequence of int or str
        Absolute years (``1958``) or offsets relative to the intervention
        (``"t-1"``). Each contributes the treated/donor outcome at that year.
    covariate_aggregates : sequence of (name, aggregation, window)
        ``aggregation`` is ``"mean"`` or ``"last"``; ``window`` is an
        inclusive (start, end) pair or None for the whole pre-window. The
        name ``"outcome"`` refers to the outcome series unless a covariate
        of that name exists.
    standardize : bool
        Z-score every predictor row across treated and donors before
        weighting (population standard deviation).
    """

    outcome_lags: Tuple[Union[int, str], ...] = ()
    covariate_aggregates: Tuple[Tuple[str, str, Optional[Window]], ...] = ()
    standardize: bool = True

    @classmethod
    def outcome_path(cls, tspec: TreatmentSpec, panel: Panel, standardize: bool = False):
        """Every pre-window outcome as its own predictor."""
        t = tspec.resolve(panel)
        return cls(outcome_lags=tuple(range(t.pre_window[0], t.pre_window[1] + 1)),
                   standardize=standardize)


@dataclass(frozen=True)
class PredictorMatrices:
    """Treated predictor vector X1 and donor matrix X0 (K x J)."""

    x_treated: np.ndarray
    x_donors: np.ndarray
    labels: Tuple[str, ...]
    donor_ids: Tuple[str, ...]
    raw_treated: np.ndarray
    raw_donors: np.ndarray


_LAG_RE = re.compile(r"^\s*t\s*-\s*(\d+)\s*$")


def _lag_year(lag, t0: int) -> Tuple[int, str]:
    if isinstance(lag, str):
        m = _LAG_RE.match(lag)
        if not m:
            raise SpecError(f"cannot parse outcome lag {lag!r}; use a year or 't-k'")
        k = int(m.group(1))
        return t0 - k, f"t-{k}"
    return int(lag), str(int(lag))


def build_predictors(panel: Panel, tspec: TreatmentSpec, pspec: PredictorSpec) -> PredictorMatrices:
    """
    Assemble X1 and X0 in ``pspec`` order, standardizing last.

    Raises
    ------
    SpecError
        A referenced year falls outside the pre-window or a covariate is
        unknown.
    """
    t = tspec.resolve(panel)
    pre_lo, pre_hi = t.pre_window
    rows = [panel.unit_index(t.treated_unit)] + [panel.unit_index(d) for d in t.donors]
    values: List[np.ndarray] = []
    labels: List[str] = []

    for lag in pspec.outcome_lags:
        year, tag = _lag_year(lag, t.intervention_period)
        if not pre_lo <= year <= pre_hi:
            raise SpecError(f"outcome lag {tag} (year {year}) outside pre_window {pre_lo}-{pre_hi}")
        values.append(panel.outcomes[rows, panel.period_index(year)])
        labels.append(f"outcome ({tag})")

    for entry in pspec.covariate_aggregates:
        name, agg, window = (tuple(entry) + (None,))[:3]
        if name in panel.covariates:
            M = panel.covariates[name]
        elif name == "outcome":
            M = panel.outcomes
        else:
            raise SpecError(f"unknown covariate {name!r}")
        lo, hi = (pre_lo, pre_hi) if window is None else (int(window[0]), int(window[1]))
        if lo > hi or lo < pre_lo or hi > pre_hi:
            raise SpecError(f"covariate window {lo}-{hi} for {name!r} outside pre_window "
                            f"{pre_lo}-{pre_hi}")
        cols = panel.window_indices((lo, hi))
        if agg == "mean":
            values.append(M[rows][:, cols].mean(axis=1))
        elif agg == "last":
            values.append(M[rows, cols[-1]])
        else:
            raise SpecError(f"aggregation must be 'mean' or 'last', got {agg!r}")
        labels.append(name if window is None else f"{name} ({lo}-{hi}, {agg})")

    if not values:
        raise SpecError("predictor spec is empty")
    raw = np.vstack(values)
    X = raw
    if pspec.standardize:
        mu = raw.mean(axis=1, keepdims=True)
        sd = raw.std(axis=1, keepdims=True)
        X = np.divide(raw - mu, sd, out=np.zeros_like(raw), where=sd > 0)
    return PredictorMatrices(
        x_treated=X[:, 0].copy(), x_donors=X[:, 1:].copy(), labels=tuple(labels),
        donor_ids=t.donors, raw_treated=raw[:, 0].copy(), raw_donors=raw[:, 1:].copy(),
    )


def validate_balance(panel: Panel) -> dict:
    """Coverage and range diagnostics for a panel; never raises."""
    n, t = panel.outcomes.shape
    report = {
        "balanced": bool(np.all(np.isfinite(panel.outcomes))),
        "n_units": n,
        "n_periods": t,
        "cells": n * t,
        "period_range": [int(panel.periods[0]), int(panel.periods[-1])],
        "consecutive_periods": bool(np.all(np.diff(panel.periods) == 1)),
        "unique_units": len(set(panel.units)) == n,
        "outcome_scale": panel.outcome_scale,
        "columns": {},
    }
    for name, M in [("outcome", panel.outcomes), *panel.covariates.items()]:
        lo, hi = float(np.min(M)), float(np.max(M))
        entry = {"min": lo, "max": hi, "missing": int(np.sum(~np.isfinite(M)))}
        if lo == hi:
            entry["note"] = "min=max"
        report["columns"][name] = entry
    return report
