import json
from pathlib import Path

import numpy as np
import pytest

from counterfact.cli import main
from counterfact.dgp import DgpSpec, generate_panel
from counterfact.pipeline import SEED_ENV, StageError, render_bundle, resolve_seed, run_pipeline


def _bundle_files(root: Path):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_text()
    man = json.loads(out.pop("manifest.json"))
    man.pop("timestamps")
    return out, man


@pytest.fixture
def workspace(tmp_path):
    panel, _ = generate_panel(DgpSpec(n_units=8, n_periods=16, t0=11, rank=2, noise_sd=0.3,
                                      hull_safe=True, effect_path=1.0, seed=7))
    panel.to_csv(tmp_path / "panel.csv")
    return tmp_path


def write_config(root: Path, name="run.json", **over):
    cfg = {
        "data": {"path": "panel.csv", "outcome_label": "Outcome"},
        "treatment": {"treated_unit": "unit_00", "intervention_period": 1911},
        "estimators": ["scm", {"name": "sdid", "inference": {"method": "placebo", "n_reps": 50}}],
        "inference": {"placebo": True, "loo": True},
        "output_dir": "bundle",
        "seed": 11,
    }
    cfg.update(over)
    path = root / name
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_bundle(workspace, capsys):
    cfg = write_config(workspace)
    assert main(["run", str(cfg)]) == 0
    out = Path(capsys.readouterr().out.strip())
    assert out == workspace / "bundle"
    man = json.loads((out / "manifest.json").read_text())
    assert {"toolkit_version", "config", "config_sha256", "seed", "estimators",
            "scale_labels", "files", "timestamps"} <= set(man)
    assert man["seed"] == 11
    for rel in man["files"]:
        assert (out / rel).is_file()
    scm = json.loads((out / "results" / "scm.json").read_text())
    assert abs(sum(scm["weights"].values()) - 1) < 1e-9
    assert main(["render", str(out)]) == 0
    assert capsys.readouterr().out == render_bundle(out)


def test_worker_count_does_not_change_bundle(workspace):
    cfg = write_config(workspace)
    a = run_pipeline(cfg, workspace / "w1", workers=1)
    b = run_pipeline(cfg, workspace / "w8", workers=8)
    assert _bundle_files(a) == _bundle_files(b)


def test_rerun_replaces_bundle(workspace):
    cfg = write_config(workspace)
    out = run_pipeline(cfg, workspace / "b")
    (out / "stray.txt").write_text("x")
    run_pipeline(cfg, out)
    assert not (out / "stray.txt").exists()


@pytest.mark.parametrize("cli, env, expected", [(3, "5", 3), (None, "5", 5), (None, None, 11),
                                                (None, "", 11)])
def test_seed_precedence(monkeypatch, cli, env, expected):
    if env is None:
        monkeypatch.delenv(SEED_ENV, raising=False)
    else:
        monkeypatch.setenv(SEED_ENV, env)
    assert resolve_seed(cli, 11) == expected


def test_seed_reaches_manifest(workspace, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "23")
    out = run_pipeline(write_config(workspace), workspace / "s")
    assert json.loads((out / "manifest.json").read_text())["seed"] == 23


@pytest.mark.parametrize("mutate", [
    lambda root: (root / "run.json").write_text("{not json"),
    lambda root: write_config(root, data={"path": "missing.csv"}),
    lambda root: write_config(root, estimators=["nope"]),
    lambda root: write_config(root, treatment={"treated_unit": "ghost", "intervention_period": 1911}),
    lambda root: write_config(root, extra=1),
])
def test_config_failures_exit_2(workspace, capsys, mutate):
    mutate(workspace)
    code = main(["run", str(workspace / "run.json"), "--out", str(workspace / "never")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["stage"] == "config"
    assert not (workspace / "never").exists()


def test_estimation_failure_exits_3(workspace, capsys):
    (workspace / "panel.csv").write_text(
        "unit,year,outcome\n" + "".join(f"{u},{t},1.0\n" for u in "abcd" for t in range(2000, 2008)))
    write_config(workspace, treatment={"treated_unit": "a", "intervention_period": 2005},
                 estimators=["scm"], inference={})
    code = main(["run", str(workspace / "run.json"), "--out", str(workspace / "never")])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["stage"] == "estimation"
    assert not (workspace / "never").exists()


def test_failed_run_leaves_old_bundle(workspace):
    cfg = write_config(workspace)
    out = run_pipeline(cfg, workspace / "keep")
    before = _bundle_files(out)
    write_config(workspace, estimators=["nope"])
    with pytest.raises(StageError):
        run_pipeline(cfg, out)
    assert _bundle_files(out) == before


def test_simulate_stdout_and_dir(tmp_path, capsys):
    dgp = tmp_path / "dgp.json"
    dgp.write_text(json.dumps({"n_units": 5, "n_periods": 9, "t0": 6, "seed": 2}))
    assert main(["simulate", str(dgp)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].startswith("unit,year")
    assert len(text.splitlines()) == 1 + 5 * 9
    assert main(["simulate", str(dgp), "--out", str(tmp_path / "sim"), "--seed", "2"]) == 0
    assert (tmp_path / "sim" / "panel.csv").read_text() == text
    truth = json.loads((tmp_path / "sim" / "truth.json").read_text())
    assert truth["intervention_period"] == 1906


def test_simulate_with_recovery(tmp_path):
    dgp = tmp_path / "dgp.json"
    dgp.write_text(json.dumps({"n_units": 5, "n_periods": 10, "t0": 7, "noise_sd": 0.1, "seed": 2,
                               "recovery": {"estimators": ["scm"], "n_reps": 50}}))
    assert main(["simulate", str(dgp), "--out", str(tmp_path / "r")]) == 0
    rec = json.loads((tmp_path / "r" / "recovery.json").read_text())
    assert "scm" in json.dumps(rec)
    assert (tmp_path / "r" / "recovery.csv").is_file()


def test_simulate_bad_spec_exits_2(tmp_path):
    dgp = tmp_path / "dgp.json"
    dgp.write_text(json.dumps({"n_units": 1}))
    assert main(["simulate", str(dgp)]) == 2


def test_render_rejects_non_bundle(tmp_path):
    assert main(["render", str(tmp_path)]) == 2
