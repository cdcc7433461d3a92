import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from counterfact.errors import DegenerateError, SpecError
from counterfact.panel import PredictorSpec, TreatmentSpec
from counterfact.scm import (SolverConfig, balance_table, effect_summary, fit_scm, gap_series,
                             inner_weights)

from conftest import make_panel, spec_for
from oracles import grid_minimize, weighted_ls_objective


def donors(seed, J=5, T=12):
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.normal(size=(J, T)), axis=1) + 3 * rng.normal(size=(J, 1))


def test_exact_copy_gets_full_weight():
    D = donors(0)
    p = make_panel(np.vstack([D[2], D]))
    fit = fit_scm(p, spec_for(p, 8))
    assert fit.weights["d3"] > 0.999
    assert fit.pre_mspe < 1e-12


def test_midpoint_recovery():
    D = donors(1, J=4)
    p = make_panel(np.vstack([0.5 * D[0] + 0.5 * D[1], D]))
    fit = fit_scm(p, spec_for(p, 8))
    np.testing.assert_allclose(fit.weights.w, [0.5, 0.5, 0, 0], atol=1e-6)


def test_known_weights_recovered():
    D = donors(2, J=6, T=20)
    w = np.array([0.62, 0.27, 0.11, 0, 0, 0])
    p = make_panel(np.vstack([w @ D, D]))
    fit = fit_scm(p, spec_for(p, 14))
    np.testing.assert_allclose(fit.weights.w, w, atol=1e-6)
    np.testing.assert_allclose(fit.gap.values, 0, atol=1e-8)


def test_effect_summary_percentages():
    # synthetic equals donor d1 exactly; treated is 50% above it after 2005
    D = np.array([[10.0] * 10, [20.0] * 10, [30.0] * 10]) + np.arange(10)
    y = D[0].copy()
    y[5:] *= 1.5
    p = make_panel(np.vstack([y, D]))
    t = spec_for(p, 5)
    fit = fit_scm(p, t)
    s = effect_summary(fit.gap, p, t)
    synthetic_post = D[0, 5:]
    assert s.att == pytest.approx(np.mean(0.5 * synthetic_post))
    assert s.pct_vs_synthetic == pytest.approx(0.5)
    assert s.pct_vs_last_pre == pytest.approx(s.att / y[4])
    assert s.decade_effects == {}


def test_decades_and_window_split():
    D = donors(3, J=3, T=30)
    y = 0.5 * D[0] + 0.5 * D[1]
    y[10:] += np.arange(20)
    p = make_panel(np.vstack([y, D]), start=1961)
    t = TreatmentSpec("T", 1971, split_year=1980).resolve(p)
    s = effect_summary(fit_scm(p, t).gap, p, t)
    assert sorted(s.decade_effects) == [1980, 1990]
    assert s.decade_effects[1980] == pytest.approx(9, abs=1e-6)
    assert s.window_split[0] == pytest.approx(np.mean(np.arange(9)), abs=1e-6)
    assert s.window_split[1] == pytest.approx(np.mean(np.arange(9, 20)), abs=1e-6)


def test_zero_effect_gives_zero_percentages():
    D = donors(4, J=3)
    p = make_panel(np.vstack([D[0], D]))
    t = spec_for(p, 8)
    s = effect_summary(fit_scm(p, t).gap, p, t)
    assert abs(s.att) < 1e-8


def test_gap_series_matches_fit():
    D = donors(5)
    p = make_panel(np.vstack([D.mean(axis=0) + 0.1, D]))
    t = spec_for(p, 8)
    fit = fit_scm(p, t)
    np.testing.assert_allclose(gap_series(p, t, fit).values, fit.gap.values)


@pytest.mark.parametrize("scale, shift", [(2.0, 0.0), (1.0, 100.0), (-3.0, 5.0), (0.01, -7.0)])
def test_affine_equivariance(scale, shift):
    rng = np.random.default_rng(6)
    D = donors(6)
    y = D[:3].mean(axis=0) + rng.normal(scale=0.3, size=D.shape[1])
    Y = np.vstack([y, D])
    p1, p2 = make_panel(Y), make_panel(scale * Y + shift)
    f1, f2 = fit_scm(p1, spec_for(p1, 8)), fit_scm(p2, spec_for(p2, 8))
    np.testing.assert_allclose(f1.weights.w, f2.weights.w, atol=1e-7)
    np.testing.assert_allclose(scale * f1.gap.values, f2.gap.values, atol=1e-6 * abs(scale) + 1e-9)


def test_predictor_fit_with_nested_v():
    rng = np.random.default_rng(7)
    D = donors(7, J=6, T=15)
    gdp = rng.normal(size=(7, 15))
    y = 0.7 * D[0] + 0.3 * D[4]
    gdp[0] = 0.7 * gdp[1] + 0.3 * gdp[5]
    p = make_panel(np.vstack([y, D]), covariates={"gdp": gdp})
    t = spec_for(p, 10)
    ps = PredictorSpec(outcome_lags=("t-1", "t-3", "t-5"),
                       covariate_aggregates=(("gdp", "mean", None),))
    fit = fit_scm(p, t, ps, SolverConfig(seed=3))
    assert fit.pre_mspe < 1e-8
    assert fit.v.v.sum() == pytest.approx(1.0)
    tab = balance_table(p, t, ps, fit)
    assert list(tab.columns) == ["predictor", "treated", "synthetic", "donor_mean"]
    np.testing.assert_allclose(tab.treated, tab.synthetic, atol=1e-4)


@pytest.mark.parametrize("method", ["regression", "equal", (0.25, 0.25, 0.5)])
def test_v_methods(method):
    D = donors(8, J=4)
    p = make_panel(np.vstack([D[1] * 0.5 + D[2] * 0.5, D]))
    t = spec_for(p, 8)
    ps = PredictorSpec(outcome_lags=(2001, 2004, 2007))
    fit = fit_scm(p, t, ps, SolverConfig(v_method=method))
    np.testing.assert_allclose(fit.v.v.sum(), 1.0)
    assert fit.weights.w.min() >= 0


def test_inner_weights_against_grid():
    rng = np.random.default_rng(9)
    x1, X0, v = rng.normal(size=5), rng.normal(size=(5, 3)), rng.dirichlet(np.ones(5))
    wv = inner_weights(x1, X0, v)
    _, ref, _ = grid_minimize(weighted_ls_objective(x1, X0, v), 3)
    assert wv.objective == pytest.approx(ref, rel=1e-6)


def test_errors():
    D = donors(10, J=3)
    p = make_panel(np.vstack([D[0], D]))
    with pytest.raises(SpecError):
        fit_scm(p, TreatmentSpec("T", 2001, donors=("d1", "d2")).resolve(p))
    with pytest.raises(SpecError):
        fit_scm(p, TreatmentSpec("T", 2006, donors=("d1",)).resolve(p))
    flat = make_panel(np.ones((4, 10)))
    with pytest.raises(DegenerateError):
        fit_scm(flat, spec_for(flat, 5))
    with pytest.raises(SpecError):
        fit_scm(p, spec_for(p, 6), PredictorSpec(outcome_lags=(2000,)),
                SolverConfig(v_method=(1.0, 2.0)))


def test_deterministic_given_seed():
    D = donors(11, J=6, T=15)
    rng = np.random.default_rng(0)
    p = make_panel(np.vstack([D[:3].mean(axis=0) + rng.normal(size=15), D]))
    t = spec_for(p, 10)
    ps = PredictorSpec(outcome_lags=("t-1", "t-2", "t-5", "t-8"))
    a = fit_scm(p, t, ps, SolverConfig(seed=4))
    b = fit_scm(p, t, ps, SolverConfig(seed=4))
    np.testing.assert_array_equal(a.weights.w, b.weights.w)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(3, 10), st.integers(0, 10 ** 6))
def test_weights_on_simplex_property(J, T_pre, seed):
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(J + 1, T_pre + 3)).cumsum(axis=1)
    p = make_panel(Y)
    fit = fit_scm(p, spec_for(p, T_pre))
    w = fit.weights.w
    assert w.min() >= 0 and abs(w.sum() - 1) < 1e-6
    # the fit never does worse than the best single donor or the uniform mix
    pre = Y[:, :T_pre]
    alt = [np.mean((pre[0] - pre[j]) ** 2) for j in range(1, J + 1)]
    alt.append(np.mean((pre[0] - pre[1:].mean(axis=0)) ** 2))
    assert fit.pre_mspe <= min(alt) + 1e-9
