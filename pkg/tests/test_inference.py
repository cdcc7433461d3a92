import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from counterfact.ascm import EstimatorConfig
from counterfact.dgp import DgpSpec, generate_panel
from counterfact.errors import SpecError
from counterfact.inference import (PlaceboEnsemble, PlaceboEntry, leave_one_out, mspe_ratio,
                                   permutation_p, placebo_in_space, placebo_in_time)
from counterfact.panel import PredictorSpec, TreatmentSpec
from counterfact.scm import GapSeries, SolverConfig, fit_scm

from conftest import make_panel, spec_for

T4 = TreatmentSpec("T", 2002, (2000, 2001), (2002, 2003))


def test_mspe_ratio_arithmetic():
    g = GapSeries(np.arange(2000, 2004), np.array([1.0, -1.0, 2.0, -2.0]))
    m = mspe_ratio(g, T4)
    assert (m.pre_mspe, m.post_mspe, m.ratio, m.infinite) == (1.0, 4.0, 4.0, False)


@pytest.mark.parametrize("post, ratio", [([1.0, 0.0], math.inf), ([0.0, 0.0], 0.0)])
def test_mspe_ratio_zero_pre(post, ratio):
    g = GapSeries(np.arange(2000, 2004), np.array([0.0, 0.0, *post]))
    m = mspe_ratio(g, T4)
    assert m.ratio == ratio and m.infinite


def ensemble(ratios, treated_ratio, treated_pre=1.0, pres=None, infinite=()):
    entries = [PlaceboEntry("T", None, treated_pre, treated_pre * treated_ratio, treated_ratio)]
    for k, r in enumerate(ratios):
        pre = 1.0 if pres is None else pres[k]
        inf = k in infinite
        entries.append(PlaceboEntry(f"d{k:02d}", None, 0.0 if inf else pre, r * pre,
                                    math.inf if inf else r, inf))
    return PlaceboEnsemble("T", entries, T4)


def test_rank_one_of_twenty_one():
    rep = permutation_p(ensemble(np.linspace(1, 5, 20), 10.0))
    assert rep.rank == 1 and rep.n_units_ranked == 21
    assert rep.p_value == pytest.approx(1 / 21)


def test_ties_count_against_treated():
    ratios = np.linspace(1, 5, 20)
    ratios[7] = 10.0
    rep = permutation_p(ensemble(ratios, 10.0))
    assert rep.p_value == pytest.approx(2 / 21)


def test_infinite_placebos_are_excluded_with_warning():
    with pytest.warns(RuntimeWarning):
        rep = permutation_p(ensemble([1.0, 2.0, 3.0], 2.5, infinite=(0,)))
    assert rep.excluded_infinite == ["d00"]
    assert rep.p_value == pytest.approx(2 / 3)


def test_infinite_treated_gives_undefined_p():
    e = ensemble([1.0, 2.0], 1.0)
    e.entries[0] = PlaceboEntry("T", None, 0.0, 1.0, math.inf, True)
    with pytest.warns(RuntimeWarning):
        rep = permutation_p(e)
    assert math.isnan(rep.p_value) and rep.rank is None


def test_fit_filter_is_opt_in():
    e = ensemble([20.0, 1.0, 2.0], 10.0, treated_pre=1.0, pres=[6.0, 1.0, 1.0])
    assert permutation_p(e).p_value == pytest.approx(2 / 4)
    filtered = permutation_p(e, fit_filter=5)
    assert filtered.filtered_out == ["d00"] and filtered.p_value == pytest.approx(1 / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=30), st.floats(0.01, 100))
def test_p_value_bounds_property(ratios, treated):
    rep = permutation_p(ensemble(ratios, treated))
    n = len(ratios) + 1
    assert 1 / n <= rep.p_value <= 1
    assert rep.p_value == pytest.approx(rep.rank / n)


@pytest.fixture(scope="module")
def sim():
    spec = DgpSpec(n_units=8, n_periods=20, t0=14, noise_sd=0.3, effect_path=3.0, seed=2,
                   hull_safe=True)
    p, truth = generate_panel(spec)
    return p, truth.treatment_spec().resolve(p)


def test_placebo_refits_exclude_the_treated_unit(sim):
    p, t = sim
    ens = placebo_in_space(p, t)
    assert [e.unit for e in ens.entries] == sorted([t.treated_unit, *t.donors])
    u = t.donors[3]
    spec = TreatmentSpec(u, t.intervention_period, donors=[d for d in t.donors if d != u])
    ref = fit_scm(p, spec)
    np.testing.assert_allclose(ens.entry(u).gap.values, ref.gap.values, atol=1e-12)
    assert permutation_p(ens).rank == 1
    assert list(ens.ratios_frame().columns) == ["unit", "mspe_ratio"]
    assert list(ens.gaps_frame().columns) == ["unit", "year", "gap"]


def test_placebo_worker_invariant(sim):
    p, t = sim
    a = placebo_in_space(p, t, workers=1).ratios_frame()
    b = placebo_in_space(p, t, workers=4).ratios_frame()
    assert a.equals(b)


def test_placebo_with_ascm(sim):
    p, t = sim
    ens = placebo_in_space(p, t, EstimatorConfig(name="ascm"))
    assert ens.metadata["estimator"] == "ascm"
    assert all(e.error is None for e in ens.entries)


def test_backdate_truncates_at_real_intervention(sim):
    p, t = sim
    res = placebo_in_time(p, t, 1910)
    assert res.tspec.pre_window == (1900, 1909) and res.tspec.post_window == (1910, 1913)
    full = placebo_in_time(p, t, 1910, full_horizon=True)
    assert full.tspec.post_window == (1910, 1919)
    assert abs(res.pseudo_att) < 2 * res.pre_gap_sd + 1e-12
    assert list(res.path_frame().columns)[:2] == ["pseudo_year", "year"]


def test_backdate_at_real_date_is_baseline(sim):
    p, t = sim
    res = placebo_in_time(p, t, t.intervention_period)
    base = fit_scm(p, t)
    np.testing.assert_allclose(res.fit.gap.values, base.gap.values)


@pytest.mark.parametrize("year", [1920, 1901])
def test_backdate_errors(sim, year):
    p, t = sim
    with pytest.raises(SpecError):
        placebo_in_time(p, t, year)


def test_leave_one_out_zero_weight_donor():
    rng = np.random.default_rng(3)
    D = rng.normal(size=(6, 16)).cumsum(axis=1)
    y = 0.6 * D[0] + 0.4 * D[1]
    y[11:] += 2.0
    p = make_panel(np.vstack([y, D]))
    t = spec_for(p, 11)
    res = leave_one_out(p, t)
    base = res.baseline.weights.as_dict()
    for e in res.entries:
        if base[e.dropped] < 1e-9:
            assert np.max(np.abs(e.synthetic_path - res.baseline_path)) < 1e-6
    env = res.envelope()
    assert np.all(env.lower <= env.baseline) and np.all(env.baseline <= env.upper)
    assert len(res.paths_frame()) == 6 * 16


@pytest.mark.parametrize("reestimate_v", [False, True])
def test_leave_one_out_with_standardized_predictors(reestimate_v):
    spec = DgpSpec(n_units=9, n_periods=24, t0=16, rank=2, noise_sd=0.3, hull_safe=True, seed=3)
    p, truth = generate_panel(spec)
    ps = PredictorSpec(outcome_lags=("t-1", "t-4", "t-8"),
                       covariate_aggregates=(("outcome", "mean", None),))
    ec = EstimatorConfig(pspec=ps, solver=SolverConfig(v_method="nested"))
    res = leave_one_out(p, truth.treatment_spec(), ec, reestimate_v=reestimate_v)
    base = res.baseline.weights.as_dict()
    assert len(res.entries) == 8 and all(e.error is None for e in res.entries)
    moved = [np.max(np.abs(e.synthetic_path - res.baseline_path))
             for e in res.entries if base[e.dropped] < 1e-10]
    if not reestimate_v:
        # the baseline metric is held, so unused donors change nothing
        assert max(moved) < 1e-6
    else:
        # a fresh predictor-weight search may move off the baseline
        assert all(np.isfinite(moved))


def test_leave_one_out_needs_three_donors():
    p = make_panel(np.random.default_rng(0).normal(size=(3, 8)))
    with pytest.raises(SpecError):
        leave_one_out(p, spec_for(p, 5))
