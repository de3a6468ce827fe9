import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from reactkd.errors import ConfigError, NotApplicableError, ShapeMismatchError
from reactkd.losses import (
    FocalConfig,
    LogitsPair,
    LossReport,
    RgdWeights,
    TotalWeights,
    edge_loss,
    focal_loss,
    gw_term,
    kd_loss,
    node_loss,
    rgd_loss,
    rgd_value_from_components,
    soft_predictions,
    total_loss,
    total_value_from_components,
)
from reactkd.regiongraph import build_graph

seeds = st.integers(0, 2**32 - 1)


# ------------------------------------------------------------------ softmax


def test_soft_predictions_examples():
    assert np.allclose(soft_predictions([0.0, 0.0, 0.0], 1.0), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(soft_predictions([math.log(2.0), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-15)
    hot = 1 / (1 + math.exp(-0.01))  # large temperature flattens towards uniform
    assert np.allclose(soft_predictions([5.0, -5.0], 1000.0), [hot, 1 - hot], atol=1e-15)
    with pytest.raises(ConfigError):
        soft_predictions([1.0], 0.0)


@given(seed=seeds)
def test_soft_predictions_are_a_stable_simplex(seed):
    z = np.random.default_rng(seed).normal(0, 300, size=5)
    p = soft_predictions(z, 0.7)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12


# ---------------------------------------------------------------------- KD


def test_kd_self_divergence_is_zero():
    r = kd_loss([1.0, -2.0, 0.5], [1.0, -2.0, 0.5], 4.0)
    assert r.value == 0.0
    assert np.all(r.gradients["logits"] == 0.0)


def test_kd_closed_form():
    r = kd_loss(LogitsPair(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0))
    assert r.value == pytest.approx((math.e - 1) / (math.e + 1), abs=1e-12)
    assert r.value == pytest.approx(0.46212, abs=1e-5)


def test_kd_validation():
    with pytest.raises(ShapeMismatchError):
        kd_loss([1.0, 2.0], [1.0], 1.0)
    with pytest.raises(ConfigError):
        LogitsPair(np.zeros(2), np.zeros(2), -1.0)


@given(seed=seeds)
def test_kd_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t, s, tau = rng.normal(0, 2, 3), rng.normal(0, 2, 3), rng.uniform(0.5, 5)
    g = kd_loss(t, s, tau).gradients["logits"]
    fd = central_difference(lambda x: kd_loss(t, x, tau).value, s)
    assert relative_error(g, fd) <= 1e-6


@given(seed=seeds)
def test_kd_is_nonnegative_and_vanishes_only_on_equal_distributions(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(0, 3, 3), rng.normal(0, 3, 3)
    assert kd_loss(t, s, 2.0).value >= 0
    # a constant shift leaves the softened distribution unchanged
    assert kd_loss(t, t + 3.7, 2.0).value <= 1e-12


# -------------------------------------------------------------------- focal


def test_focal_reduces_to_cross_entropy():
    z = np.array([0.3, -1.2, 2.0])
    r = focal_loss(z, 1, FocalConfig(alpha=(1.0, 1.0, 1.0), gamma=0.0))
    assert r.value == pytest.approx(-np.log(soft_predictions(z)[1]), abs=1e-12)


def test_focal_confident_prediction_costs_nothing():
    assert focal_loss([800.0, 0.0, 0.0], 0).value == 0.0


def test_focal_hand_value():
    r = focal_loss([0.0, 0.0], 0, FocalConfig(alpha=(1.0, 1.0), gamma=2.0))
    assert r.value == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert r.value == pytest.approx(0.17329, abs=1e-5)


def test_focal_validation():
    with pytest.raises(ConfigError):
        focal_loss([0.0, 0.0, 0.0], 3)
    with pytest.raises(ConfigError):
        FocalConfig(gamma=-1.0)


@given(seed=seeds)
def test_focal_gamma_zero_matches_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, 3)
    y = int(rng.integers(3))
    ce = -np.log(soft_predictions(z)[y])
    assert abs(focal_loss(z, y, FocalConfig((1.0, 1.0, 1.0), 0.0)).value - ce) <= 1e-12


@given(seed=seeds)
def test_focal_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, 3)
    y = int(rng.integers(3))
    cfg = FocalConfig(tuple(rng.uniform(0.5, 2, 3)), float(rng.uniform(0, 3)))
    g = focal_loss(z, y, cfg).gradients["logits"]
    fd = central_difference(lambda x: focal_loss(x, y, cfg).value, z)
    assert relative_error(g, fd) <= 1e-6


# ------------------------------------------------------------- node / edge


def test_node_examples():
    f = np.random.default_rng(0).normal(size=(3, 4))
    assert node_loss(f, f).value == 0.0
    assert node_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).value == 2.0


def test_edge_examples():
    f = np.random.default_rng(0).normal(size=(3, 4))
    assert edge_loss(build_graph(f), build_graph(f)).value == 0.0
    student = np.array([[1.0, 0.0], [0.0, 1.0]])  # S = I
    teacher = np.array([[1.0, 0.0], [2.0, 0.0]])  # S = all ones
    assert edge_loss(student, teacher).value == 0.5


def test_node_and_edge_need_matching_cardinality():
    with pytest.raises(NotApplicableError):
        node_loss(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(NotApplicableError):
        edge_loss(np.ones((2, 3)), np.ones((3, 3)))


@given(seed=seeds, n=st.integers(1, 4))
def test_node_and_edge_gradients_match_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    for loss in (node_loss, edge_loss):
        g = loss(fs, ft).gradients["node_features"]
        fd = central_difference(lambda x: loss(x, ft).value, fs)
        if np.linalg.norm(fd) > 1e-6:
            assert relative_error(g, fd) <= 1e-6
        else:
            assert np.abs(g - fd).max() <= 1e-9


@given(seed=seeds, n=st.integers(1, 5))
def test_node_and_edge_are_invariant_to_joint_relabelling(seed, n):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    assert node_loss(fs[perm], ft[perm]).value == pytest.approx(node_loss(fs, ft).value, abs=1e-12)
    assert edge_loss(fs[perm], ft[perm]).value == pytest.approx(edge_loss(fs, ft).value, abs=1e-12)
    assert 0 <= node_loss(fs, ft).value <= 4 and 0 <= edge_loss(fs, ft).value <= 4


# -------------------------------------------------------------------- GW / RGD


@given(seed=seeds)
def test_gw_gradient_with_frozen_plan(seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    plan = gw_term(fs, ft).plan
    g = gw_term(fs, ft, plan=plan).gradients["node_features"]
    fd = central_difference(lambda x: gw_term(x, ft, plan=plan).value, fs)
    assert relative_error(g, fd) <= 1e-6


def test_rgd_weight_selection_and_identical_graphs():
    rng = np.random.default_rng(1)
    fs, ft = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    only_node = rgd_loss(fs, ft, RgdWeights(1.0, 0.0, 0.0))
    assert only_node.value == node_loss(fs, ft).value
    assert rgd_loss(fs, fs, RgdWeights(0.3, 1.7, 2.0)).value <= 1e-6


def test_rgd_falls_back_to_gw_for_different_node_counts():
    rng = np.random.default_rng(2)
    fs, ft = rng.normal(size=(2, 4)), rng.normal(size=(4, 4))
    r = rgd_loss(fs, ft, RgdWeights(1.0, 1.0, 2.0))
    assert r.components["node"] is None and r.components["edge"] is None
    assert r.components["gw_only"] == 1.0
    assert r.value == 2.0 * r.components["gw"]
    with pytest.raises(ConfigError):
        rgd_loss(fs, ft, RgdWeights(1.0, 1.0, 0.0))


@given(seed=seeds, n=st.integers(1, 4), m=st.integers(1, 4))
def test_rgd_components_recompose_the_value(seed, n, m):
    rng = np.random.default_rng(seed)
    w = RgdWeights(*rng.uniform(0.1, 3, 3))
    r = rgd_loss(rng.normal(size=(n, 3)), rng.normal(size=(m, 3)), w)
    assert abs(rgd_value_from_components(r.components, w) - r.value) <= 1e-12


@given(seed=seeds, a=st.floats(0.01, 100))
def test_rgd_and_total_are_linear_in_their_weights(seed, a):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    lam = rng.uniform(0.1, 3, 3)
    plan = gw_term(fs, ft).plan
    base = rgd_loss(fs, ft, RgdWeights(*lam), plan=plan).value
    scaled = rgd_loss(fs, ft, RgdWeights(*(a * lam)), plan=plan).value
    assert scaled == pytest.approx(a * base, rel=1e-12, abs=1e-15)

    z, t = rng.normal(size=3), rng.normal(size=3)
    parts = (focal_loss(z, 1), kd_loss(t, z, 4.0), rgd_loss(fs, ft, plan=plan))
    mu = rng.uniform(0.1, 3, 3)
    v1 = total_loss(*parts, TotalWeights(*mu)).value
    v2 = total_loss(*parts, TotalWeights(*(a * mu))).value
    assert v2 == pytest.approx(a * v1, rel=1e-12, abs=1e-15)


# --------------------------------------------------------------------- total


def test_total_examples():
    z, t = np.array([0.2, -0.4, 1.0]), np.array([1.0, 0.0, -1.0])
    f, k = focal_loss(z, 2), kd_loss(t, z, 4.0)
    r = rgd_loss(np.eye(3), np.eye(3) + 0.1)
    only_focal = total_loss(f, k, r, TotalWeights(1.0, 0.0, 0.0))
    assert only_focal.value == f.value
    zero = LossReport(0.0)
    assert total_loss(zero, zero, zero).value == 0.0
    full = total_loss(f, k, r, TotalWeights(0.5, 2.0, 1.5))
    assert abs(total_value_from_components(full.components, TotalWeights(0.5, 2.0, 1.5)) - full.value) <= 1e-12


def test_total_rejects_incompatible_gradients():
    a = LossReport(1.0, gradients={"logits": np.zeros(3)})
    b = LossReport(1.0, gradients={"logits": np.zeros(2)})
    with pytest.raises(ShapeMismatchError):
        total_loss(a, b, LossReport(0.0))


def test_weights_validation():
    with pytest.raises(ConfigError):
        TotalWeights(0.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        RgdWeights(-1.0, 1.0, 1.0)


def test_report_json():
    r = rgd_loss(np.ones((2, 3)) + np.eye(2, 3), np.ones((3, 3)) + np.eye(3))
    payload = r.to_json()
    assert set(payload) == {"value", "components", "converged"}
    assert payload["components"]["node"] is None
