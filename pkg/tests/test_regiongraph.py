import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_gap, brute_regions
from reactkd.errors import DegenerateInputError, EmptyLiverError, FormatError, ShapeMismatchError
from reactkd.regiongraph import (
    RegionGraph,
    build_graph,
    cosine_matrix,
    extract_regions,
    graph_from_volume,
    load_graph,
    masked_gap,
    project_node_scores,
    save_graph,
)
from reactkd.volio import MaskVolume, refine_mask


def _box_mask():
    labels = np.zeros((8, 10, 10), dtype=np.uint16)
    labels[1:7, 1:9, 1:9] = 1
    labels[2:5, 2:5, 2:5] = 2  # 27 voxels
    labels[3:5, 6:8, 6:8] = 3  # 8 voxels
    return labels


# ----------------------------------------------------------------- regions


def test_liver_and_two_tumours_give_three_regions():
    regions = extract_regions(MaskVolume(_box_mask()))
    assert [r.label for r in regions] == [1, 2, 3]
    assert [r.voxel_count for r in regions] == [6 * 8 * 8 - 27 - 8, 27, 8]


def test_liver_only_gives_one_region():
    labels = np.zeros((4, 4, 4), dtype=np.uint16)
    labels[1:3, 1:3, 1:3] = 1
    regions = extract_regions(labels)
    assert len(regions) == 1 and regions[0].voxel_count == 8


def test_tumour_order_follows_size_not_label():
    labels = np.zeros((10, 12, 12), dtype=np.uint16)
    labels[:] = 1
    labels[1:2, 1:8, 1:2] = 2  # 7 voxels
    labels[4:9, 4:6, 4:8] = 3  # 40 voxels
    regions = extract_regions(labels)
    oracle = brute_regions(labels)
    assert [r.voxel_count for r in regions[1:]] == [40, 7]
    for r, (lab, comp) in zip(regions, oracle):
        assert r.label == lab and np.array_equal(r.mask, comp)


def test_empty_liver():
    with pytest.raises(EmptyLiverError):
        extract_regions(np.full((2, 2, 2), 2, dtype=np.uint16))


@given(seed=st.integers(0, 2**32 - 1))
def test_extract_regions_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(4, size=(5, 6, 6), p=[0.3, 0.4, 0.15, 0.15]).astype(np.uint16)
    labels[0, 0, 0] = 1
    regions = extract_regions(labels)
    oracle = brute_regions(labels)
    assert len(regions) == len(oracle)
    for r, (lab, comp) in zip(regions, oracle):
        assert r.label == lab and np.array_equal(r.mask, comp)


@given(seed=st.integers(0, 2**32 - 1))
def test_refined_region_count_is_stable(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(4, size=(6, 8, 8), p=[0.3, 0.5, 0.1, 0.1]).astype(np.uint16)
    labels[3, 3, 3] = 1
    once = refine_mask(MaskVolume(labels))
    twice = refine_mask(once)
    assert len(extract_regions(once)) == len(extract_regions(twice))


# -------------------------------------------------------------------- pooling


def test_gap_of_constant_and_singleton():
    f = np.full((3, 4, 4, 4), 2.5)
    region = np.zeros((4, 4, 4), dtype=bool)
    region[1:3, 1:3, :] = True
    assert np.array_equal(masked_gap(f, region), [2.5, 2.5, 2.5])
    g = np.random.default_rng(0).normal(size=(2, 4, 4, 4))
    single = np.zeros((4, 4, 4), dtype=bool)
    single[2, 1, 3] = True
    assert np.array_equal(masked_gap(g, single), g[:, 2, 1, 3])


def test_gap_rejects_empty_and_mismatched_regions():
    f = np.ones((2, 3, 3, 3))
    with pytest.raises(DegenerateInputError):
        masked_gap(f, np.zeros((3, 3, 3), dtype=bool))
    with pytest.raises(ShapeMismatchError):
        masked_gap(f, np.ones((3, 3, 4), dtype=bool))


@given(seed=st.integers(0, 2**32 - 1))
def test_gap_matches_summation_loop(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 3, 3, 3))
    region = rng.random((3, 3, 3)) < 0.5
    region[1, 1, 1] = True
    assert np.allclose(masked_gap(f, region), brute_gap(f, region), atol=1e-10, rtol=0)


# --------------------------------------------------------------------- graph


def test_graph_hand_examples():
    assert np.allclose(build_graph([[1.0, 2.0], [1.0, 2.0]]).edges, np.ones((2, 2)), atol=1e-15, rtol=0)
    assert np.array_equal(build_graph([[1.0, 0.0], [0.0, 1.0]]).edges, np.eye(2))
    s = build_graph([[1.0, 0.0], [1.0, 1.0]]).edges
    assert s[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    assert s[0, 1] == pytest.approx(0.70711, abs=1e-5)


def test_zero_norm_feature_is_an_error():
    with pytest.raises(DegenerateInputError):
        build_graph([[1.0, 0.0], [0.0, 0.0]])


def test_ragged_features_rejected():
    with pytest.raises(ShapeMismatchError):
        build_graph([[1.0, 0.0], [1.0]])


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), c=st.integers(1, 5))
def test_graph_permutation_equivariance_and_scale_invariance(seed, n, c):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, c))
    s = build_graph(feats).edges
    perm = rng.permutation(n)
    assert np.allclose(build_graph(feats[perm]).edges, s[np.ix_(perm, perm)], atol=1e-12)
    scales = rng.uniform(0.01, 100.0, size=(n, 1))
    assert np.allclose(build_graph(feats * scales).edges, s, atol=1e-12)


def test_graph_json_round_trip(tmp_path):
    f = np.random.default_rng(1).normal(size=(2, 8, 10, 10))
    g = graph_from_volume(f, MaskVolume(_box_mask()))
    save_graph(tmp_path / "g.json", g)
    h = load_graph(tmp_path / "g.json")
    assert np.array_equal(h.edges, g.edges)
    assert np.array_equal(h.features, g.features)
    assert [n.voxel_count for n in h.nodes] == [n.voxel_count for n in g.nodes]


def test_malformed_graph_json():
    with pytest.raises(FormatError):
        RegionGraph.from_json({"nodes": [{"label": 1, "voxel_count": 3, "feature": [1.0]}], "edges": [[1, 0]]})


def test_features_on_a_coarser_grid_follow_the_mask():
    labels = _box_mask()
    f = np.random.default_rng(2).normal(size=(3, 4, 5, 5))
    g = graph_from_volume(f, labels)
    assert g.n_nodes >= 1 and g.features.shape[1] == 3


# -------------------------------------------------------------- projection


def test_projection_indicator_and_two_level_map():
    labels = np.zeros((4, 4, 4), dtype=np.uint16)
    labels[:, :2] = 1
    labels[1:3, 0, 0:2] = 2
    regions = extract_regions(labels)
    ones = project_node_scores(MaskVolume(labels), regions, [1.0, 1.0]).data
    assert np.array_equal(ones, (labels > 0).astype(float))
    two = project_node_scores(MaskVolume(labels), regions, [0.2, 0.9]).data
    assert np.all(two[labels == 2] == 0.9) and np.all(two[labels == 1] == 0.2) and np.all(two[labels == 0] == 0)


def test_projection_length_mismatch():
    labels = np.ones((2, 2, 2), dtype=np.uint16)
    with pytest.raises(ShapeMismatchError):
        project_node_scores(MaskVolume(labels), extract_regions(labels), [0.1, 0.2])


@given(seed=st.integers(0, 2**32 - 1))
def test_projection_then_pooling_recovers_scores(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(4, size=(4, 5, 5), p=[0.2, 0.5, 0.15, 0.15]).astype(np.uint16)
    labels[0, 0, 0] = 1
    regions = extract_regions(labels)
    scores = rng.uniform(size=len(regions))
    vol = project_node_scores(MaskVolume(labels), regions, scores).data
    recovered = [masked_gap(vol[None], r)[0] for r in regions]
    # volumes hold float32, so the round trip is exact at that precision
    assert np.allclose(recovered, scores.astype(np.float32), atol=1e-15, rtol=0)


# -------------------------------------------------------------- invariants


@given(seed=st.integers(0, 2**32 - 1))
def test_cosine_matrix_invariants(seed):
    rng = np.random.default_rng(seed)
    s = cosine_matrix(rng.normal(size=(int(rng.integers(1, 8)), int(rng.integers(1, 6)))))
    assert np.abs(s - s.T).max() <= 1e-12
    assert np.all(np.diag(s) == 1.0)
    assert s.min() >= -1 - 1e-12 and s.max() <= 1 + 1e-12
