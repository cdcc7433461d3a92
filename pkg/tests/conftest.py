import numpy as np
import pytest

from counterfact.panel import Panel, TreatmentSpec

_ACCEPTANCE = {}


def make_panel(Y, start=2000, names=None, **kw):
    """Panel from a matrix whose row 0 is the treated unit ``T``."""
    Y = np.asarray(Y, dtype=float)
    if names is None:
        names = ["T"] + [f"d{j}" for j in range(1, Y.shape[0])]
    return Panel(names, start + np.arange(Y.shape[1]), Y, **kw)


def spec_for(panel, t0_index, treated="T", **kw):
    return TreatmentSpec(treated, int(panel.periods[t0_index]), **kw).resolve(panel)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    for item in items:
        if item.fspath.basename == "test_acceptance.py":
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _ACCEPTANCE[item.nodeid] = [doc, None]


def pytest_runtest_logreport(report):
    entry = _ACCEPTANCE.get(report.nodeid)
    if entry is None:
        return
    if report.when == "call" or report.outcome != "passed":
        if entry[1] in (None, "passed"):
            entry[1] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for doc, outcome in sorted(_ACCEPTANCE.values()):
        tag = {"passed": "PASS", None: "NOT RUN"}.get(outcome, "FAIL")
        terminalreporter.write_line(f"[{tag}] {doc}")
