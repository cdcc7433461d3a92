import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from counterfact.errors import BalanceError, DomainError, FormatError, SpecError
from counterfact.panel import (Panel, PredictorSpec, TreatmentSpec, build_predictors, load_panel,
                               validate_balance)

from conftest import make_panel


def long_csv(units, years, values, extra=None):
    rows = []
    for i, u in enumerate(units):
        for k, y in enumerate(years):
            row = {"unit": u, "year": y, "outcome": values[i][k]}
            if extra:
                row.update({name: M[i][k] for name, M in extra.items()})
            rows.append(row)
    return pd.DataFrame(rows).to_csv(index=False)


def test_round_trip_preserves_values():
    Y = np.arange(12, dtype=float).reshape(3, 4) + 0.125
    p = make_panel(Y)
    back = load_panel(p.to_csv())
    assert back.units == p.units
    np.testing.assert_array_equal(back.periods, p.periods)
    np.testing.assert_array_equal(back.outcomes, p.outcomes)


def test_log_scale_transforms_and_round_trips():
    text = long_csv(["a", "b"], [1, 2], [[1.0, np.e], [10.0, 100.0]])
    p = load_panel(text, outcome_scale="log")
    np.testing.assert_allclose(p.outcomes, [[0.0, 1.0], [np.log(10), np.log(100)]])
    again = load_panel(p.to_csv(), outcome_scale="log", assume_transformed=True)
    np.testing.assert_array_equal(again.outcomes, p.outcomes)


def test_log_scale_rejects_nonpositive():
    text = long_csv(["a", "b"], [1, 2], [[1.0, 0.0], [1.0, 2.0]])
    with pytest.raises(DomainError):
        load_panel(text, outcome_scale="log")


def test_missing_cell_lists_gaps():
    text = "unit,year,outcome\na,1,1\na,2,2\nb,1,3\n"
    with pytest.raises(BalanceError) as exc:
        load_panel(text)
    assert exc.value.gaps == [("b", 2)]


def test_empty_outcome_is_a_gap():
    text = "unit,year,outcome\na,1,1\na,2,\nb,1,3\nb,2,4\n"
    with pytest.raises(BalanceError) as exc:
        load_panel(text)
    assert exc.value.gaps == [("a", 2)]


@pytest.mark.parametrize("text", [
    "unit,year,outcome\na,1,1\na,1,2\nb,1,3\n",     # duplicate key
    "unit,year\na,1\n",                               # missing column
    "unit,year,outcome\na,x,1\n",                     # non-integer period
    "unit,year,outcome\na,1,abc\n",                   # non-numeric outcome
    "unit,year,outcome\na,1.5,1\n",
])
def test_format_errors(text):
    with pytest.raises(FormatError):
        load_panel(text)


def test_custom_schema_and_covariates():
    text = "country,yr,imr,gdp\nA,1,5,1\nA,2,6,2\nB,1,7,3\nB,2,8,4\n"
    p = load_panel(io.StringIO(text), {"unit": "country", "period": "yr", "outcome": "imr",
                                       "covariates": ["gdp"]})
    np.testing.assert_array_equal(p.covariates["gdp"], [[1, 2], [3, 4]])
    assert p.to_frame({"unit": "country", "period": "yr", "outcome": "imr"}).columns[:3].tolist() == \
        ["country", "yr", "imr"]


def test_units_are_sorted_with_rows():
    p = Panel(["b", "a"], [1, 2], [[1.0, 2.0], [3.0, 4.0]])
    assert p.units == ("a", "b")
    np.testing.assert_array_equal(p.series("b"), [1.0, 2.0])


def test_panel_rejects_gappy_periods():
    with pytest.raises(FormatError):
        Panel(["a"], [1, 3], [[1.0, 2.0]])


def test_panel_is_read_only():
    p = make_panel(np.ones((2, 3)))
    with pytest.raises(ValueError):
        p.outcomes[0, 0] = 5.0


def test_treatment_spec_defaults():
    p = make_panel(np.random.default_rng(0).normal(size=(4, 10)))
    t = TreatmentSpec("T", 2006).resolve(p)
    assert t.pre_window == (2000, 2005) and t.post_window == (2006, 2009)
    assert t.donors == ("d1", "d2", "d3")


@pytest.mark.parametrize("kw", [
    {"pre_window": (2000, 2006)},
    {"post_window": (2005, 2009)},
    {"pre_window": (1990, 2005)},
    {"donors": ("T", "d1")},
])
def test_treatment_spec_errors(kw):
    p = make_panel(np.zeros((3, 10)))
    with pytest.raises(SpecError):
        TreatmentSpec("T", 2006, **kw).resolve(p)


def test_unknown_unit():
    with pytest.raises(SpecError):
        TreatmentSpec("nope", 2001).resolve(make_panel(np.zeros((3, 3))))


def test_zscore_oracle():
    # a single predictor row with values 1 (treated), 2, 3 -> population z-scores
    Y = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    p = make_panel(Y)
    t = TreatmentSpec("T", 2001).resolve(p)
    pm = build_predictors(p, t, PredictorSpec(outcome_lags=(2000,)))
    assert pm.x_treated[0] == pytest.approx(-1.224744871391589, abs=1e-12)
    np.testing.assert_allclose(pm.x_donors[0], [0.0, 1.224744871391589])


def test_predictor_lags_and_aggregates():
    Y = np.arange(15, dtype=float).reshape(3, 5)
    gdp = Y * 10
    p = make_panel(Y, covariates={"gdp": gdp})
    t = TreatmentSpec("T", 2004).resolve(p)
    pm = build_predictors(p, t, PredictorSpec(("t-1", 2000), (("gdp", "mean", (2001, 2002)),
                                                               ("outcome", "last", None)),
                                              standardize=False))
    assert pm.labels == ("outcome (t-1)", "outcome (2000)", "gdp (2001-2002, mean)", "outcome")
    np.testing.assert_allclose(pm.x_treated, [3.0, 0.0, 15.0, 3.0])
    np.testing.assert_allclose(pm.x_donors[:, 1], [13.0, 10.0, 115.0, 13.0])


@pytest.mark.parametrize("pspec", [
    PredictorSpec(outcome_lags=(2004,)),
    PredictorSpec(outcome_lags=("t-9",)),
    PredictorSpec(outcome_lags=("lag1",)),
    PredictorSpec(covariate_aggregates=(("nope", "mean", None),)),
    PredictorSpec(covariate_aggregates=(("outcome", "median", None),)),
    PredictorSpec(),
])
def test_predictor_spec_errors(pspec):
    p = make_panel(np.arange(15, dtype=float).reshape(3, 5))
    with pytest.raises(SpecError):
        build_predictors(p, TreatmentSpec("T", 2004).resolve(p), pspec)


def test_validate_balance_report():
    rep = validate_balance(make_panel(np.ones((2, 3))))
    assert rep["balanced"] and rep["cells"] == 6
    assert rep["columns"]["outcome"]["note"] == "min=max"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text("abcdefgh", min_size=1, max_size=4), min_size=2, max_size=6, unique=True),
       st.integers(2, 6), st.integers(0, 10_000))
def test_csv_round_trip_property(names, n_periods, seed):
    Y = np.random.default_rng(seed).normal(size=(len(names), n_periods))
    p = Panel(names, 1950 + np.arange(n_periods), Y)
    back = load_panel(p.to_csv())
    assert back.units == tuple(sorted(names))
    np.testing.assert_array_equal(back.outcomes, p.outcomes)
