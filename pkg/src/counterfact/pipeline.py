"""
Config-driven batch runs that write self-describing result bundles.

A run reads one JSON config, loads the panel, fits the requested estimators
and inference procedures, and writes a bundle directory::

    manifest.json          config echo and hash, version, scale labels, files
    results/*.json         one document per estimator or procedure
    tables/*.txt|csv|json  rendered tables and the values they were built from
    plots/*.csv            plot data

The bundle is assembled in a temporary sibling directory and renamed into
place, so a failed run leaves nothing behind. Output is a deterministic
function of config and seed; wall-clock times live only in the manifest's
``timestamps`` field.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from counterfact import __version__
from counterfact._util import dumps
from counterfact.ascm import (EstimatorConfig, GridConfig, PermutationConfig, RidgeConfig,
                              conformal_interval, fit_ascm)
from counterfact.errors import (BalanceError, ConfigError, CounterfactError, DomainError,
                                FormatError, SpecError)
from counterfact.factor import CvConfig, factor_inference, fit_ife, fit_matrix_completion
from counterfact.inference import leave_one_out, permutation_p, placebo_in_space, placebo_in_time
from counterfact.panel import PredictorSpec, TreatmentSpec, build_predictors, load_panel
from counterfact.report import (BalanceBlock, SummaryColumn, emit_plot_data, frame_csv,
                                render_balance_table, render_summary_table)
from counterfact.scm import SolverConfig, balance_table, effect_summary, fit_scm
from counterfact.sdid import SdidConfig, fit_sdid, sdid_inference

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3
ESTIMATOR_NAMES = ("scm", "ascm", "sdid", "ife", "mc")
SEED_ENV = "COUNTERFACT_SEED"


class StageError(Exception):
    """Wraps a failure with the exit code of the stage it happened in."""

    def __init__(self, code: int, payload: dict):
        super().__init__(payload.get("message", ""))
        self.code = code
        self.payload = payload


@dataclass
class RunConfig:
    data: dict
    treatment: dict
    predictors: Optional[dict] = None
    estimators: List[dict] = field(default_factory=lambda: [{"name": "scm"}])
    inference: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    seed: int = 0
    base_dir: Path = Path(".")

    @classmethod
    def from_json(cls, text: str, base_dir: Path = Path(".")) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"data", "treatment", "predictors", "estimators", "inference",
                              "output_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("data", "treatment"):
            if not isinstance(raw.get(key), dict):
                raise ConfigError(f"config needs a '{key}' object")
        if "path" not in raw["data"]:
            raise ConfigError("data.path is required")
        est = raw.get("estimators", [{"name": "scm"}])
        est = [{"name": e} if isinstance(e, str) else dict(e) for e in est]
        for e in est:
            if e.get("name") not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {e.get('name')!r}; choose from {ESTIMATOR_NAMES}")
        names = [e["name"] for e in est]
        if len(set(names)) != len(names):
            raise ConfigError("each estimator may appear once")
        return cls(raw["data"], raw["treatment"], raw.get("predictors"), est,
                   raw.get("inference") or {}, raw.get("output_dir"), int(raw.get("seed", 0)),
                   base_dir)

    def estimator(self, name: str) -> Optional[dict]:
        for e in self.estimators:
            if e["name"] == name:
                return e
        return None

    def tspec(self) -> TreatmentSpec:
        t = dict(self.treatment)
        try:
            return TreatmentSpec(
                treated_unit=str(t["treated_unit"]),
                intervention_period=int(t["intervention_period"]),
                pre_window=tuple(t["pre_window"]) if t.get("pre_window") else None,
                post_window=tuple(t["post_window"]) if t.get("post_window") else None,
                split_year=t.get("split_year"),
                donors=tuple(t["donors"]) if t.get("donors") else None,
            )
        except KeyError as exc:
            raise ConfigError(f"treatment.{exc.args[0]} is required") from exc

    def pspec(self) -> Optional[PredictorSpec]:
        if not self.predictors:
            return None
        p = self.predictors
        aggs = tuple((a[0], a[1], tuple(a[2]) if a[2] else None)
                     for a in p.get("covariate_aggregates", []))
        return PredictorSpec(tuple(p.get("outcome_lags", [])), aggs, bool(p.get("standardize", True)))


def _solver(cfg: dict, seed: int) -> SolverConfig:
    s = dict(cfg or {})
    if isinstance(s.get("v_method"), list):
        s["v_method"] = tuple(s["v_method"])
    s.setdefault("seed", seed)
    try:
        return SolverConfig(**s)
    except TypeError as exc:
        raise ConfigError(f"bad solver settings: {exc}") from exc


def _ridge(cfg: dict) -> RidgeConfig:
    r = dict(cfg or {})
    if r.get("grid") is not None:
        r["grid"] = tuple(r["grid"])
    try:
        return RidgeConfig(**r)
    except TypeError as exc:
        raise ConfigError(f"bad ridge settings: {exc}") from exc


def _build(cls, cfg, what: str):
    try:
        return cls(**(cfg or {}))
    except TypeError as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from exc


def _mean_post(path, periods, window) -> float:
    m = (periods >= window[0]) & (periods <= window[1])
    return float(np.mean(path[m]))


def _ratio(num, den):
    return None if den == 0 else float(num) / float(den)


class Run:
    """One pipeline execution: holds the loaded inputs and collected outputs."""

    def __init__(self, config: RunConfig, seed: int, workers: int = 1):
        self.config = config
        self.seed = seed
        self.workers = workers
        self.files: Dict[str, str] = {}
        self.tables: Dict[str, dict] = {}
        self.plot_inputs: Dict[str, Any] = {}

    def load(self):
        d = self.config.data
        path = Path(d["path"])
        if not path.is_absolute():
            path = self.config.base_dir / path
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        with open(path, "rb") as fh:
            self.panel = load_panel(fh, d.get("schema"), d.get("outcome_scale", "level"))
        self.tspec = self.config.tspec().resolve(self.panel)
        self.pspec = self.config.pspec()
        if self.pspec is not None:
            build_predictors(self.panel, self.tspec, self.pspec)
        self.label = d.get("outcome_label") or (d.get("schema") or {}).get("outcome", "outcome")
        self.scale = self.panel.outcome_scale

    def write_json(self, name: str, obj):
        self.files[f"results/{name}.json"] = dumps(obj)

    def column(self, **kw) -> dict:
        return SummaryColumn(label=self.label, scale=self.scale, **kw).to_dict()

    def run_estimators(self):
        cfg, t, p = self.config, self.tspec, self.pspec
        e = cfg.estimator("scm")
        self.scm = None
        if e is not None:
            solver = _solver(e.get("solver"), self.seed)
            self.scm = fit_scm(self.panel, t, p, solver)
            summary = effect_summary(self.scm.gap, self.panel, t)
            doc = self.scm.to_dict()
            doc["summary"] = summary.to_dict()
            doc["scale"] = self.scale
            self.write_json("scm", doc)
            self.plot_inputs["scm"] = self.scm
            self.tables["scm"] = {"kind": "scm", "columns": [self.column(
                estimate=summary.att, pct_vs_synthetic=summary.pct_vs_synthetic,
                pct_vs_last_pre=summary.pct_vs_last_pre, decade_effects=summary.decade_effects,
                window_split=summary.window_split, split_year=summary.split_year)]}
            if p is not None:
                bal = balance_table(self.panel, t, p, self.scm)
                self.files["tables/balance.csv"] = frame_csv(bal)
                self.files["tables/balance.txt"] = render_balance_table(
                    [BalanceBlock(self.label, self.scm.weights.as_dict(), bal)]).text

        e = cfg.estimator("ascm")
        if e is not None:
            solver = _solver(e.get("solver"), self.seed)
            fit = fit_ascm(self.panel, t, p, _ridge(e.get("ridge")), solver)
            self.ascm = fit
            doc = fit.to_dict()
            doc["scale"] = self.scale
            col = dict(estimate=fit.att, pct_vs_synthetic=_ratio(
                fit.att, _mean_post(fit.corrected_path, fit.periods, t.post_window)))
            conf = cfg.inference.get("conformal")
            confidence = 0.95
            if conf:
                conf = {} if conf is True else dict(conf)
                alpha = float(conf.get("alpha", 0.05))
                confidence = 1.0 - alpha
                res = conformal_interval(
                    self.panel, t, p,
                    EstimatorConfig(name="ascm", pspec=p, solver=solver, ridge=_ridge(e.get("ridge"))),
                    GridConfig(n_points=int(conf.get("n_points", 201)),
                               lower=conf.get("lower"), upper=conf.get("upper")),
                    PermutationConfig(scheme=conf.get("scheme", "moving-block"),
                                      block_length=conf.get("block_length"),
                                      n_permutations=int(conf.get("n_permutations", 1000))),
                    alpha=alpha, seed=self.seed, workers=self.workers)
                self.write_json("conformal", res)
                self.plot_inputs["conformal"] = res
                col["ci"] = res.interval
            self.write_json("ascm", doc)
            self.plot_inputs["ascm"] = fit
            self.tables["ascm"] = {"kind": "ascm", "confidence": confidence,
                                   "columns": [self.column(**col)]}

        e = cfg.estimator("sdid")
        if e is not None:
            reg = _build(SdidConfig, e.get("reg_config"), "sdid reg_config")
            fit = fit_sdid(self.panel, t, reg)
            inf_cfg = e.get("inference", {"method": "placebo", "n_reps": 1000})
            inf = None
            if inf_cfg:
                inf = sdid_inference(self.panel, t, fit, inf_cfg.get("method", "placebo"),
                                     int(inf_cfg.get("n_reps", 1000)), self.seed, reg, self.workers)
            doc = fit.to_dict()
            doc["scale"] = self.scale
            doc["inference"] = inf
            self.write_json("sdid", doc)
            self.plot_inputs["sdid"] = fit
            self.plot_inputs["sdid_inference"] = inf
            self.tables["sdid"] = {"kind": "sdid", "columns": [self.column(
                estimate=fit.tau_hat, se=inf.se if inf else None, ci=inf.ci if inf else None,
                p_value=inf.p_value if inf else None)]}

        panels = []
        e = cfg.estimator("ife")
        if e is not None:
            fit = fit_ife(self.panel, t, e.get("r_candidates"), seed=self.seed)
            n_reps = int(e.get("n_reps", 500))
            inf = factor_inference(self.panel, t, fit, n_reps, self.seed, e.get("block_length"),
                                   self.workers) if n_reps else None
            doc = fit.to_dict()
            doc.update(scale=self.scale, inference=inf)
            self.write_json("ife", doc)
            panels.append(["Interactive Fixed Effects", [self.column(
                estimate=fit.att, se=inf.se if inf else None, ci=inf.ci if inf else None,
                p_value=inf.p_value if inf else None)]])
        e = cfg.estimator("mc")
        if e is not None:
            fixed = e.get("lambdas")
            grids = [[float(x)] for x in fixed] if fixed else [e.get("lambda_grid")]
            n_reps = int(e.get("n_reps", 500))
            docs, fits = [], []
            cv = _build(CvConfig, e.get("cv"), "mc cv")
            for g in grids:
                fit = fit_matrix_completion(self.panel, t, g, cv, self.seed)
                inf = factor_inference(self.panel, t, fit, n_reps, self.seed, e.get("block_length"),
                                       self.workers) if n_reps else None
                doc = fit.to_dict()
                doc.update(scale=self.scale, inference=inf)
                docs.append(doc)
                fits.append(fit)
                panels.append([f"Matrix Completion (lambda={fit.lambda_nn:.3g})", [self.column(
                    estimate=fit.att, se=inf.se if inf else None, ci=inf.ci if inf else None,
                    p_value=inf.p_value if inf else None)]])
            self.write_json("mc", {"fits": docs})
            self.plot_inputs["mc"] = fits
        if panels:
            self.tables["factor"] = {"kind": "factor", "panels": panels}

    def run_inference(self):
        inf, t, p = self.config.inference, self.tspec, self.pspec
        scm_cfg = self.config.estimator("scm") or {}
        ec = EstimatorConfig(name="scm", pspec=p, solver=_solver(scm_cfg.get("solver"), self.seed))
        if inf.get("placebo"):
            opts = inf["placebo"] if isinstance(inf["placebo"], dict) else {}
            ens = placebo_in_space(self.panel, t, ec, opts.get("fit_filter"), self.workers)
            rep = permutation_p(ens)
            self.write_json("placebo", {"ensemble": ens, "permutation": rep})
            self.plot_inputs["placebo"] = ens
        if inf.get("backdate"):
            opts = inf["backdate"]
            if not isinstance(opts, dict) or "pseudo_year" not in opts:
                raise ConfigError("inference.backdate needs a pseudo_year")
            res = placebo_in_time(self.panel, t, int(opts["pseudo_year"]), ec,
                                  bool(opts.get("full_horizon", False)))
            self.write_json("backdate", res)
            self.plot_inputs["backdate"] = res
        if inf.get("loo"):
            opts = inf["loo"] if isinstance(inf["loo"], dict) else {}
            res = leave_one_out(self.panel, t, ec, self.workers,
                                reestimate_v=bool(opts.get("reestimate_v", False)))
            self.write_json("loo", res)
            self.plot_inputs["loo"] = res

    def render(self):
        self.files["tables/summary.json"] = dumps(self.tables)
        for name, spec in self.tables.items():
            table = render_summary_table(spec)
            self.files[f"tables/{name}.txt"] = table.text
            self.files[f"tables/{name}.csv"] = table.csv
        for fname, df in emit_plot_data(self.plot_inputs).items():
            self.files[f"plots/{fname}"] = frame_csv(df)


def resolve_seed(cli_seed: Optional[int], config_seed: int) -> int:
    """``--seed`` wins over ``COUNTERFACT_SEED``, which wins over the config."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return int(config_seed)


def _write_bundle(target: Path, files: Dict[str, str]):
    target = target.resolve()
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        for rel, text in sorted(files.items()):
            path = tmp / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        old = None
        if target.exists():
            old = target.parent / f".{target.name}.old-{os.getpid()}"
            os.rename(target, old)
        os.rename(tmp, target)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_pipeline(config_path, out_dir=None, seed: Optional[int] = None,
                 workers: int = 1) -> Path:
    """
    Execute a run and write its bundle; returns the bundle path.

    Raises
    ------
    StageError
        ``code`` 2 for config or data problems, 3 for estimation failures.
        No output directory is created or modified in either case.
    """
    started = _now()
    config_path = Path(config_path)
    try:
        raw = config_path.read_bytes()
        config = RunConfig.from_json(raw.decode("utf-8"), config_path.parent)
        run_seed = resolve_seed(seed, config.seed)
        if out_dir is None:
            if not config.output_dir:
                raise ConfigError("no output directory: pass --out or set output_dir")
            out_dir = Path(config.output_dir)
            if not out_dir.is_absolute():
                out_dir = config_path.parent / out_dir
        run = Run(config, run_seed, workers)
        run.load()
    except (OSError, UnicodeDecodeError, ConfigError, FormatError, BalanceError, DomainError,
            SpecError) as exc:
        raise StageError(EXIT_CONFIG, {"stage": "config", "error": type(exc).__name__,
                                       "message": str(exc)}) from exc

    try:
        run.run_estimators()
        run.run_inference()
        run.render()
    except ConfigError as exc:
        raise StageError(EXIT_CONFIG, {"stage": "config", "error": type(exc).__name__,
                                       "message": str(exc)}) from exc
    except (CounterfactError, np.linalg.LinAlgError) as exc:
        raise StageError(EXIT_ESTIMATION, {"stage": "estimation", "error": type(exc).__name__,
                                           "message": str(exc)}) from exc

    manifest = {
        "toolkit": "counterfact",
        "toolkit_version": __version__,
        "config": json.loads(raw.decode("utf-8")),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": run_seed,
        "estimators": [e["name"] for e in config.estimators],
        "scale_labels": {"outcome": run.scale, "label": run.label},
        "files": sorted(run.files),
        "timestamps": {"started": started, "finished": _now()},
    }
    run.files["manifest.json"] = dumps(manifest)
    _write_bundle(Path(out_dir), run.files)
    return Path(out_dir)


def render_bundle(bundle_dir) -> str:
    """Re-render every table of a bundle from its stored table values."""
    bundle_dir = Path(bundle_dir)
    path = bundle_dir / "tables" / "summary.json"
    if not path.exists():
        raise ConfigError(f"{bundle_dir} is not a result bundle (missing tables/summary.json)")
    tables = json.loads(path.read_text(encoding="utf-8"))
    parts = [render_summary_table(spec).text for _, spec in sorted(tables.items())]
    balance = bundle_dir / "tables" / "balance.txt"
    if balance.exists():
        parts.insert(0, balance.read_text(encoding="utf-8"))
    return "\n".join(parts)
