import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gw_grid_optimum_2x2, gw_quadruple_loop
from reactkd.errors import ConfigError, DegenerateInputError, ShapeMismatchError
from reactkd.otgw import GwConfig, gw_discrepancy, gw_objective, sinkhorn_project, uniform


def random_similarity(rng, n):
    """Cosine matrix of random features: symmetric, unit diagonal, entries in [-1, 1]."""
    f = rng.normal(size=(n, 3))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    s = f @ f.T
    return 0.5 * (s + s.T)


# ---------------------------------------------------------------- objective


def test_objective_zero_on_diagonal_plan():
    s = random_similarity(np.random.default_rng(0), 4)
    assert gw_objective(s, s, np.eye(4) / 4) == pytest.approx(0.0, abs=1e-15)


def test_objective_hand_expansion_on_two_nodes():
    Ss, St = np.eye(2), np.ones((2, 2))
    pi = np.full((2, 2), 0.25)
    # (Ss_ij - 1)^2 is 1 off the diagonal and 0 on it; each pi product is 1/16
    assert gw_objective(Ss, St, pi) == pytest.approx(2 * 4 / 16, abs=1e-15)
    assert gw_objective(Ss, St, pi) == pytest.approx(gw_quadruple_loop(Ss, St, pi), abs=1e-15)


def test_objective_zero_for_equal_constant_graphs():
    rng = np.random.default_rng(1)
    pi = rng.uniform(size=(3, 4))
    pi /= pi.sum()
    assert gw_objective(np.full((3, 3), 0.7), np.full((4, 4), 0.7), pi) == pytest.approx(0.0, abs=1e-15)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), m=st.integers(1, 4))
def test_objective_matches_quadruple_loop(seed, n, m):
    rng = np.random.default_rng(seed)
    pi = rng.uniform(size=(n, m))
    pi /= pi.sum()
    Ss, St = random_similarity(rng, n), random_similarity(rng, m)
    assert gw_objective(Ss, St, pi) == pytest.approx(gw_quadruple_loop(Ss, St, pi), abs=1e-12)


def test_objective_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        gw_objective(np.eye(2), np.eye(3), np.ones((3, 2)) / 6)


# ----------------------------------------------------------------- sinkhorn


def test_sinkhorn_product_kernel_is_a_fixed_point():
    mu, nu = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.4])
    plan = sinkhorn_project(np.outer(mu, nu), mu, nu)
    assert plan.converged and plan.iterations == 1
    assert np.allclose(plan.matrix, np.outer(mu, nu), atol=1e-15)


def test_sinkhorn_two_by_two_against_long_fixed_point():
    K = np.array([[2.0, 1.0], [1.0, 2.0]])
    mu = nu = uniform(2)
    # reference: plain alternating normalisation run far past convergence
    P = K.copy()
    for _ in range(10_000):
        P *= (mu / P.sum(axis=1))[:, None]
        P *= (nu / P.sum(axis=0))[None, :]
    assert np.abs(P.sum(axis=1) - mu).max() < 1e-12
    plan = sinkhorn_project(K, mu, nu, iters=1000, tol=1e-14)
    assert np.allclose(plan.matrix, P, atol=1e-12)
    assert np.allclose(plan.matrix, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-12)


def test_sinkhorn_iteration_cap_is_flagged():
    rng = np.random.default_rng(3)
    K = rng.uniform(0.01, 1.0, (4, 5))
    plan = sinkhorn_project(K, uniform(4), uniform(5), iters=1, tol=1e-15)
    assert not plan.converged and plan.iterations == 1


def test_sinkhorn_rejects_non_positive_kernel():
    with pytest.raises(DegenerateInputError):
        sinkhorn_project(np.array([[1.0, 0.0], [1.0, 1.0]]), uniform(2), uniform(2))


# ------------------------------------------------------------------- solver


def test_identical_graphs_cost_nothing():
    s = random_similarity(np.random.default_rng(4), 5)
    cost, plan = gw_discrepancy(s, s)
    assert cost <= 1e-6
    assert plan.marginal_residual() <= 1e-8


def test_relabelled_graph_costs_nothing():
    rng = np.random.default_rng(5)
    s = random_similarity(rng, 5)
    perm = rng.permutation(5)
    cost, _ = gw_discrepancy(s, s[np.ix_(perm, perm)])
    assert cost <= 1e-6


def test_two_node_example_against_grid():
    Ss, St = np.eye(2), np.ones((2, 2))
    cost, plan = gw_discrepancy(Ss, St)
    best = gw_grid_optimum_2x2(Ss, St)
    assert cost >= best - 1e-4
    assert cost - best <= 1e-3
    assert cost == pytest.approx(gw_objective(Ss, St, plan), abs=1e-10)


def test_cost_is_objective_at_returned_plan():
    rng = np.random.default_rng(6)
    Ss, St = random_similarity(rng, 3), random_similarity(rng, 5)
    cost, plan = gw_discrepancy(Ss, St)
    assert cost >= 0
    assert cost == pytest.approx(gw_objective(Ss, St, plan.matrix), abs=1e-10)
    assert np.all(plan.matrix >= 0)


def test_solver_is_deterministic():
    rng = np.random.default_rng(7)
    Ss, St = random_similarity(rng, 4), random_similarity(rng, 3)
    cfg = GwConfig(restarts=2, seed=11)
    c1, p1 = gw_discrepancy(Ss, St, cfg=cfg)
    c2, p2 = gw_discrepancy(Ss, St, cfg=cfg)
    assert c1 == c2 and np.array_equal(p1.matrix, p2.matrix)


def test_solver_input_errors():
    with pytest.raises(ShapeMismatchError):
        gw_discrepancy(np.eye(2), np.eye(3), mu=uniform(3))
    with pytest.raises(ConfigError):
        gw_discrepancy(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(ConfigError):
        GwConfig(epsilon=0.0)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_self_distance_vanishes(seed, n):
    s = random_similarity(np.random.default_rng(seed), n)
    cost, _ = gw_discrepancy(s, s)
    assert cost <= 1e-6


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5), m=st.integers(2, 5))
def test_permutation_and_swap_invariance(seed, n, m):
    rng = np.random.default_rng(seed)
    Ss, St = random_similarity(rng, n), random_similarity(rng, m)
    base, plan = gw_discrepancy(Ss, St)
    perm = rng.permutation(m)
    permuted, _ = gw_discrepancy(Ss, St[np.ix_(perm, perm)])
    swapped, _ = gw_discrepancy(St, Ss)
    assert abs(base - permuted) <= 1e-6
    assert abs(base - swapped) <= 1e-6
    if plan.converged:
        assert plan.marginal_residual() <= 1e-8


@settings(max_examples=30)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1), d1=st.floats(0.2, 1), d2=st.floats(0.2, 1))
def test_never_beats_the_exhaustive_two_node_bound(a, b, d1, d2):
    Ss = np.array([[1.0, a], [a, d1]])
    St = np.array([[d2, b], [b, 1.0]])
    cost, _ = gw_discrepancy(Ss, St)
    best = gw_grid_optimum_2x2(Ss, St)
    assert cost >= best - 1e-4
    assert cost - best <= 1e-3
