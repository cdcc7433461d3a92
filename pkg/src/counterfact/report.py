"""
Fixed-width text and CSV rendering of result tables, plus plot-data CSVs.

Tables are built from :class:`SummaryColumn` records (one per outcome) so
that they can be rendered from live fits or from stored JSON results.
Effects carry an explicit sign, percentages two significant digits,
p-values three decimals. Every table header carries the outcome scale.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

CSV_FLOAT = "%.12g"


@dataclass
class SummaryColumn:
    """One outcome column of a summary table; missing fields render blank."""

    label: str
    scale: str = "level"
    estimate: Optional[float] = None
    pct_vs_synthetic: Optional[float] = None
    pct_vs_last_pre: Optional[float] = None
    decade_effects: Dict[int, float] = field(default_factory=dict)
    window_split: Optional[Tuple[float, float]] = None
    split_year: Optional[int] = None
    se: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    p_value: Optional[float] = None
    decade_decimals: Optional[int] = None  # decade rows; defaults to the table's decimals

    @classmethod
    def from_dict(cls, d: Mapping) -> "SummaryColumn":
        d = dict(d)
        d["decade_effects"] = {int(k): v for k, v in (d.get("decade_effects") or {}).items()}
        for key in ("ci", "window_split"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"label": self.label, "scale": self.scale, "estimate": self.estimate,
                "pct_vs_synthetic": self.pct_vs_synthetic, "pct_vs_last_pre": self.pct_vs_last_pre,
                "decade_effects": {str(k): v for k, v in sorted(self.decade_effects.items())},
                "window_split": None if self.window_split is None else list(self.window_split),
                "split_year": self.split_year, "se": self.se,
                "ci": None if self.ci is None else list(self.ci), "p_value": self.p_value,
                "decade_decimals": self.decade_decimals}


def _missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def fmt_effect(x, decimals: int = 2) -> str:
    if _missing(x):
        return ""
    s = f"{x:+.{decimals}f}"
    # avoid "-0.00"
    return "+" + s[1:] if float(s) == 0 else s


def fmt_pct(frac) -> str:
    """Signed percentage with two significant digits (integers from 100%)."""
    if _missing(frac):
        return "n/a"
    pct = 100.0 * frac
    if abs(pct) >= 100:
        body = f"{abs(pct):.0f}"
    else:
        body = f"{abs(pct):.2g}"
    sign = "-" if pct < 0 and float(body) != 0 else "+"
    return f"{sign}{body}%"


def fmt_plain(x, decimals: int) -> str:
    if _missing(x):
        return ""
    s = f"{x:.{decimals}f}"
    return s[1:] if float(s) == 0 and s.startswith("-") else s


def fmt_ci(ci, decimals: int) -> str:
    if ci is None:
        return ""
    return f"[{fmt_plain(ci[0], decimals)}, {fmt_plain(ci[1], decimals)}]"


@dataclass
class RenderedTable:
    title: str
    header: List[str]
    rows: List[Tuple[str, List[str]]]
    notes: List[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        return _fixed_width(self)

    @property
    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + self.header)
        for label, cells in self.rows:
            if label == "---":
                continue
            w.writerow([label] + (cells if cells else [""] * len(self.header)))
        return buf.getvalue()


def _fixed_width(t: RenderedTable) -> str:
    ncol = len(t.header)
    labels = [r[0] for r in t.rows if r[0] != "---"]
    w0 = max([len(x) for x in labels] + [0])
    widths = []
    for j in range(ncol):
        cells = [r[1][j] for r in t.rows if r[1]]
        widths.append(max([len(c) for c in cells] + [len(t.header[j])]))
    total = w0 + sum(w + 2 for w in widths)

    def line(label, cells):
        return (label.ljust(w0) + "".join("  " + c.rjust(w) for c, w in zip(cells, widths))).rstrip()

    out = [t.title, "=" * total]
    out.append(line("", t.header))
    out.append(line("", [f"({j + 1})" for j in range(ncol)]))
    for label, cells in t.rows:
        if label == "---":
            out.append("-" * total)
        elif not cells:
            out.append(label)
        else:
            out.append(line(label, cells))
    out.append("=" * total)
    out.extend(t.notes)
    return "\n".join(out) + "\n"


def _header(columns: Sequence[SummaryColumn]) -> List[str]:
    return [f"{c.label} [{c.scale}]" for c in columns]


def render_scm_table(columns: Sequence[SummaryColumn], decimals: int = 2,
                     title: str = "Summary of Treatment Effects") -> RenderedTable:
    """Average effect, percentage rows, optional window split and decade rows."""
    rows = [
        ("Average Effect (Post-Treatment)", [fmt_effect(c.estimate, decimals) for c in columns]),
        ("", [f"({fmt_pct(c.pct_vs_synthetic)})" for c in columns]),
        ("Effect vs. Last Pre-Treatment", [fmt_pct(c.pct_vs_last_pre) for c in columns]),
    ]
    splits = [c for c in columns if c.window_split is not None]
    if splits:
        year = splits[0].split_year
        rows.append(("---", []))
        rows.append((f"Effect before {year}", [fmt_effect(c.window_split[0] if c.window_split else None,
                                                          decimals) for c in columns]))
        rows.append((f"Effect from {year}", [fmt_effect(c.window_split[1] if c.window_split else None,
                                                        decimals) for c in columns]))
    years = sorted({y for c in columns for y in c.decade_effects})
    if years:
        rows.append(("---", []))
        rows.append(("Dynamic Effects by Decade:", []))
        for y in years:
            rows.append((str(y), [fmt_effect(c.decade_effects.get(y), decimals if c.decade_decimals is None
                                             else c.decade_decimals) for c in columns]))
    return RenderedTable(title, _header(columns), rows)


def render_ascm_table(columns: Sequence[SummaryColumn], decimals: int = 2, confidence: float = 0.95,
                      title: str = "Augmented Synthetic Control Results") -> RenderedTable:
    rows = [
        ("Augmented SCM Estimate", [fmt_effect(c.estimate, decimals) for c in columns]),
        ("", [f"({fmt_pct(c.pct_vs_synthetic)})" for c in columns]),
        (f"{confidence * 100:.0f}% Confidence Interval", [fmt_ci(c.ci, decimals) for c in columns]),
    ]
    notes = ["Note: intervals invert conformal permutation tests over a grid of effects."]
    return RenderedTable(title, _header(columns), rows, notes)


def _inference_rows(columns, decimals, ci: bool, confidence: float, estimate_label: str):
    rows = [
        (estimate_label, [fmt_effect(c.estimate, decimals) for c in columns]),
        ("Standard Error", [f"({fmt_plain(c.se, decimals)})" if not _missing(c.se) else ""
                            for c in columns]),
    ]
    if ci:
        rows.append((f"{confidence * 100:.0f}% Confidence Interval",
                     [fmt_ci(c.ci, decimals) for c in columns]))
    rows.append(("P-value", [fmt_plain(c.p_value, 3) for c in columns]))
    return rows


def render_sdid_table(columns: Sequence[SummaryColumn], decimals: int = 3, confidence: float = 0.95,
                      title: str = "Synthetic Difference-in-Differences Results",
                      note: Optional[str] = None) -> RenderedTable:
    rows = _inference_rows(columns, decimals, True, confidence, "SDID Estimate")
    return RenderedTable(title, _header(columns), rows, [note] if note else [])


def render_factor_table(panels: Sequence[Tuple[str, Sequence[SummaryColumn]]], decimals: int = 3,
                        title: str = "Alternative Estimators: Interactive Fixed Effects and "
                                     "Matrix Completion") -> RenderedTable:
    """One block of estimate / SE / p rows per (panel title, columns) pair."""
    header = _header(panels[0][1])
    rows = []
    for k, (name, columns) in enumerate(panels):
        if k:
            rows.append(("---", []))
        rows.append((f"Panel {chr(ord('A') + k)}: {name}", []))
        rows.extend(_inference_rows(columns, decimals, False, 0.95, "Estimate"))
    return RenderedTable(title, header, rows)


@dataclass
class BalanceBlock:
    """Weights and predictor balance for one outcome."""

    outcome: str
    weights: Dict[str, float]
    balance: pd.DataFrame  # predictor, treated, synthetic, donor_mean
    min_weight: float = 0.005


def render_balance_table(blocks: Sequence[BalanceBlock], decimals: int = 2,
                         title: str = "Synthetic Control Weights and Balance by Outcome"
                         ) -> RenderedTable:
    """Donor weights (those of at least ``min_weight``) then predictor balance."""
    rows = []
    for k, b in enumerate(blocks):
        if k:
            rows.append(("---", []))
        rows.append((f"{b.outcome}: Weights", []))
        for donor, w in sorted(b.weights.items(), key=lambda kv: (-kv[1], kv[0])):
            if w >= b.min_weight:
                rows.append((f"  {donor}", ["", "", f"{w:.{decimals}f}"]))
        rows.append((f"{b.outcome}: Balance", []))
        for r in b.balance.itertuples(index=False):
            rows.append((f"  {r.predictor}", [fmt_plain(r.treated, decimals),
                                             fmt_plain(r.synthetic, decimals),
                                             fmt_plain(r.donor_mean, decimals)]))
    header = ["Treated", "Synthetic", "Donor Sample / Weight"]
    return RenderedTable(title, header, rows)


def render_summary_table(results: Mapping, decimals: Optional[int] = None) -> RenderedTable:
    """
    Dispatch on ``results["kind"]``: ``"scm"``, ``"ascm"``, ``"sdid"`` take
    ``results["columns"]`` (list of column dicts); ``"factor"`` takes
    ``results["panels"]`` as ``[[title, [column dicts]], ...]``.
    """
    kind = results["kind"]
    kw = {} if decimals is None else {"decimals": decimals}
    if "title" in results:
        kw["title"] = results["title"]
    if kind == "factor":
        panels = [(name, [SummaryColumn.from_dict(c) for c in cols])
                  for name, cols in results["panels"]]
        return render_factor_table(panels, **kw)
    columns = [SummaryColumn.from_dict(c) for c in results["columns"]]
    if kind == "scm":
        return render_scm_table(columns, **kw)
    if kind == "ascm":
        return render_ascm_table(columns, confidence=results.get("confidence", 0.95), **kw)
    if kind == "sdid":
        return render_sdid_table(columns, confidence=results.get("confidence", 0.95),
                                 note=results.get("note"), **kw)
    raise ValueError(f"unknown table kind {kind!r}")


def frame_csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=CSV_FLOAT, lineterminator="\n")


def emit_plot_data(results: Mapping) -> Dict[str, pd.DataFrame]:
    """
    Plot-data tables keyed by file name, for whichever results are present.

    Recognized keys: ``scm`` (ScmFit), ``placebo`` (PlaceboEnsemble),
    ``loo`` (LooResult), ``backdate`` (BackdateResult), ``sdid`` (SdidFit)
    with optional ``sdid_inference``, ``conformal`` (ConformalResult),
    ``ascm`` (AscmFit), ``mc`` (McFit or list of McFit).
    """
    from counterfact.sdid import sdid_dynamic

    out: Dict[str, pd.DataFrame] = {}
    if results.get("scm") is not None:
        out["scm_paths.csv"] = results["scm"].paths_frame()
    if results.get("ascm") is not None:
        out["ascm_paths.csv"] = results["ascm"].paths_frame()
    if results.get("placebo") is not None:
        out["placebo_gaps.csv"] = results["placebo"].gaps_frame()
        out["mspe_ratios.csv"] = results["placebo"].ratios_frame()
    if results.get("loo") is not None:
        out["loo_paths.csv"] = results["loo"].paths_frame()
        out["loo_envelope.csv"] = results["loo"].envelope()
    if results.get("backdate") is not None:
        out["backdate_paths.csv"] = results["backdate"].path_frame()
    if results.get("sdid") is not None:
        out["sdid_dynamic.csv"] = sdid_dynamic(results["sdid"], results.get("sdid_inference"))
    if results.get("conformal") is not None:
        out["conformal_pvalues.csv"] = results["conformal"].frame()
    mc = results.get("mc")
    if mc is not None:
        fits = mc if isinstance(mc, (list, tuple)) else [mc]
        frames = []
        for f in fits:
            df = f.trace_frame()
            df.insert(0, "lambda", f.lambda_nn)
            frames.append(df)
        out["mc_objective_trace.csv"] = pd.concat(frames, ignore_index=True)
    return out
