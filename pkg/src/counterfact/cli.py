"""Command-line entry point: ``counterfact run | simulate | render``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from counterfact._util import dumps
from counterfact.errors import CounterfactError
from counterfact.pipeline import (EXIT_CONFIG, EXIT_ESTIMATION, EXIT_OK, StageError, render_bundle,
                                  run_pipeline)


def _fail(code: int, payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def cmd_run(args) -> int:
    try:
        out = run_pipeline(args.config, args.out, args.seed, args.workers)
    except StageError as exc:
        return _fail(exc.code, exc.payload)
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from counterfact.dgp import DgpSpec, generate_panel, recovery_experiment

    try:
        raw = json.loads(Path(args.dgp).read_text(encoding="utf-8"))
        recovery = raw.pop("recovery", None)
        spec = DgpSpec.from_dict(raw)
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
        panel, truth = generate_panel(spec)
    except (OSError, json.JSONDecodeError, TypeError, CounterfactError) as exc:
        return _fail(EXIT_CONFIG, {"stage": "config", "error": type(exc).__name__,
                                   "message": str(exc)})
    if args.out is None:
        sys.stdout.write(panel.to_csv())
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel.to_csv(out / "panel.csv")
    (out / "truth.json").write_text(dumps(truth.to_dict()), encoding="utf-8")
    if recovery:
        try:
            report = recovery_experiment(spec, seed=spec.seed, workers=args.workers, **recovery)
        except (TypeError, CounterfactError) as exc:
            return _fail(EXIT_ESTIMATION, {"stage": "recovery", "error": type(exc).__name__,
                                           "message": str(exc)})
        (out / "recovery.json").write_text(dumps(report.to_dict()), encoding="utf-8")
        report.to_csv(out / "recovery.csv")
    print(out)
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        sys.stdout.write(render_bundle(args.bundle))
    except (OSError, ValueError, CounterfactError) as exc:
        return _fail(EXIT_CONFIG, {"stage": "render", "error": type(exc).__name__,
                                   "message": str(exc)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="counterfact", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a JSON config and write a result bundle")
    r.add_argument("config")
    r.add_argument("--out", help="bundle directory (overrides output_dir)")
    r.add_argument("--seed", type=int, help="overrides COUNTERFACT_SEED and the config seed")
    r.add_argument("--workers", type=int, default=1, help="threads for independent refits")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="draw a panel from a DGP spec (JSON)")
    s.add_argument("dgp")
    s.add_argument("--out", help="directory for panel.csv and truth.json (default: CSV to stdout)")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("render", help="print the tables of a result bundle")
    d.add_argument("bundle")
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
