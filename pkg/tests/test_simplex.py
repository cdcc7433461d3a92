import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from counterfact.simplex import project_simplex, solve_simplex_qp

from oracles import grid_minimize, simplex_grid


def test_simplex_grid_counts():
    # compositions of n into J parts
    assert len(simplex_grid(3, 4)) == 15
    W = simplex_grid(4, 10)
    np.testing.assert_allclose(W.sum(axis=1), 1.0)
    assert W.min() >= 0


@pytest.mark.parametrize("c, expected", [
    ([0.2, 0.8], [0.2, 0.8]),
    ([1.0, 1.0], [0.5, 0.5]),
    ([2.0, 0.0, -1.0], [1.0, 0.0, 0.0]),
    ([0.5, 0.5, 0.5], [1 / 3, 1 / 3, 1 / 3]),
])
def test_projection_cases(c, expected):
    np.testing.assert_allclose(project_simplex(np.array(c)), expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_projection_is_feasible_and_idempotent(c):
    p = project_simplex(np.array(c))
    assert p.min() >= 0 and abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_qp_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    J = 3
    A = rng.normal(size=(5, J))
    b = rng.normal(size=5)
    H, g = 2 * A.T @ A, 2 * A.T @ b
    res = solve_simplex_qp(H, g)

    def obj(W):
        R = W @ A.T - b
        return np.sum(R ** 2, axis=1)

    _, ref, _ = grid_minimize(obj, J)
    got = float(np.sum((A @ res.w - b) ** 2))
    assert got <= ref + 1e-9 * max(1.0, ref)
    assert got == pytest.approx(ref, rel=1e-6, abs=1e-9)
    assert res.gap <= 1e-8


def test_qp_vertex_and_interior():
    # minimize ||w - target||^2 on the simplex
    H = 2 * np.eye(3)
    res = solve_simplex_qp(H, 2 * np.array([0.2, 0.3, 0.5]))
    np.testing.assert_allclose(res.w, [0.2, 0.3, 0.5], atol=1e-10)
    res = solve_simplex_qp(H, 2 * np.array([3.0, 0.0, 0.0]))
    np.testing.assert_allclose(res.w, [1.0, 0.0, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 9), st.integers(0, 10 ** 6))
def test_qp_kkt_property(J, K, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(K, J))
    b = rng.normal(size=K)
    H, g = 2 * A.T @ A, 2 * A.T @ b
    res = solve_simplex_qp(H, g)
    w = res.w
    assert w.min() >= 0 and abs(w.sum() - 1) < 1e-9
    grad = H @ w - g
    # Frank-Wolfe gap: no vertex improves the linearization
    scale = max(1.0, float(np.abs(grad).max()))
    assert grad @ w - grad.min() <= 1e-7 * scale


def test_optimal_warm_start_is_kept_when_optimum_not_unique():
    # two predictors, five donors: a whole face of the simplex is optimal
    rng = np.random.default_rng(3)
    X0 = rng.normal(size=(2, 5))
    w_star = np.array([0.3, 0.3, 0.4, 0.0, 0.0])
    x1 = X0 @ w_star
    H, g = 2 * X0.T @ X0, 2 * X0.T @ x1
    res = solve_simplex_qp(H, g, w0=w_star)
    np.testing.assert_allclose(res.w, w_star, atol=1e-12)
    assert res.objective == pytest.approx(-x1 @ x1, abs=1e-12)


def test_flat_problem_is_polished_to_tight_gap():
    rng = np.random.default_rng(8)
    X0 = rng.normal(size=(4, 8)) * np.array([[1.0], [1e-3], [1.0], [1e-3]])
    x1 = X0 @ rng.dirichlet(np.ones(8)) + 0.01 * rng.normal(size=4)
    res = solve_simplex_qp(2 * X0.T @ X0, 2 * X0.T @ x1)
    assert res.gap < 1e-12
    assert abs(res.w.sum() - 1) < 1e-12 and res.w.min() >= 0
