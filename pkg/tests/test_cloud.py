import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_transform
from geotr.cloud import (
    PointCloud, RigidTransform, apply_transform, build_graph, group_points, knn, radius_search, read_points,
    read_transforms, voxel_downsample, write_ply, write_transforms, write_xyz,
)
from geotr.errors import DataError, ParameterError
from geotr.kdtree import KDTree, brute_knn, brute_radius

coords = st.floats(-5, 5, allow_nan=False)


# --- voxel downsampling ----------------------------------------------------


def test_single_voxel_gives_centroid():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [0.3, 0.2, 0.4]])
    out = voxel_downsample(pts, 1.0).points
    np.testing.assert_allclose(out, [pts.mean(axis=0)], atol=1e-15)


def test_small_voxel_is_identity_up_to_order(rng):
    pts = rng.uniform(0, 1, (50, 3))
    gap = min(np.linalg.norm(a - b) for i, a in enumerate(pts) for b in pts[i + 1 :])
    out = voxel_downsample(pts, gap / math.sqrt(3) * 0.99).points
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_grid_four_centroids():
    g = np.array([[x, y, 0.0] for x in range(4) for y in range(4)]) + 0.5
    out = voxel_downsample(g, 2.0).points
    np.testing.assert_allclose(sorted(map(tuple, out)), [(1, 1, 0.5), (1, 3, 0.5), (3, 1, 0.5), (3, 3, 0.5)])


@pytest.mark.parametrize("voxel", [0.0, -1.0, float("nan")])
def test_nonpositive_voxel(voxel):
    with pytest.raises(ParameterError):
        voxel_downsample(np.zeros((2, 3)), voxel)


@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=coords), st.floats(0.1, 3))
def test_downsample_never_grows(pts, voxel):
    out = voxel_downsample(pts, voxel).points
    assert 1 <= len(out) <= len(pts)


def test_downsample_idempotent_below_min_gap(rng):
    out = voxel_downsample(rng.uniform(-1, 1, (300, 3)), 0.2).points
    gap = min(np.linalg.norm(out[i] - out[j]) for i in range(len(out)) for j in range(i))
    again = voxel_downsample(out, gap / math.sqrt(3) * 0.99).points
    assert sorted(map(tuple, again)) == sorted(map(tuple, out))


# --- nearest neighbours ----------------------------------------------------


def test_knn_self_query(backend, rng):
    pts = rng.normal(size=(120, 3))
    idx, dist = knn(pts, pts, 1)
    assert np.array_equal(idx[:, 0], np.arange(120))
    assert np.all(dist == 0)


def test_knn_collinear():
    idx, dist = knn(np.zeros((1, 3)), np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), 2)
    assert idx.tolist() == [[0, 1]]
    np.testing.assert_allclose(dist, [[0, 1]])


def test_knn_too_many():
    with pytest.raises(ParameterError):
        knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


@pytest.mark.parametrize("n", [10, 100, 500])
def test_knn_matches_exhaustive_scan(backend, n):
    rng = np.random.default_rng(n)
    base, queries = rng.normal(size=(n, 3)), rng.normal(size=(60, 3))
    k = min(7, n)
    idx, dist = knn(queries, base, k)
    for qi, q in enumerate(queries):
        d = np.sqrt(((base - q) ** 2).sum(axis=1))
        expected = sorted(range(n), key=lambda j: (d[j], j))[:k]
        assert idx[qi].tolist() == expected
        np.testing.assert_allclose(dist[qi], d[expected], rtol=1e-12)


def test_knn_ties_break_to_lower_index(backend):
    base = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]] * 20)
    idx, _ = KDTree(base).query(np.zeros((1, 3)), 5)
    assert idx.tolist() == [[0, 1, 2, 3, 4]]


@given(arrays(np.float64, st.tuples(st.integers(1, 90), st.just(3)), elements=st.integers(-3, 3).map(float)),
       st.integers(1, 5))
def test_kdtree_agrees_with_brute_force_on_ties(base, k):
    k = min(k, len(base))
    q = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, -1.0]])
    i_tree, d_tree = KDTree(base, leaf_size=2).query(q, k)
    i_brute, d_brute = brute_knn(q, base, k)
    assert np.array_equal(i_tree, i_brute)
    np.testing.assert_allclose(d_tree, d_brute)


def test_radius_search_matches_brute(backend, rng):
    base, q = rng.normal(size=(300, 3)), rng.normal(size=(20, 3))
    got = radius_search(q, base, 0.7)
    want = brute_radius(q, base, 0.7)
    for a, b in zip(got, want):
        np.testing.assert_array_equal(a, b)


# --- grouping --------------------------------------------------------------


def test_supers_equal_dense_gives_singletons(rng):
    pts = rng.normal(size=(30, 3))
    g = group_points(pts, pts)
    assert [p.tolist() for p in g.patches] == [[i] for i in range(30)]


def test_two_superpoint_patches():
    dense = np.array([[1.0, 0, 0], [2, 0, 0], [8, 0, 0], [9, 0, 0]])
    g = group_points(dense, np.array([[0.0, 0, 0], [10, 0, 0]]))
    assert [p.tolist() for p in g.patches] == [[0, 1], [2, 3]]


def test_boundary_goes_to_lower_index():
    g = group_points(np.array([[5.0, 0, 0]]), np.array([[0.0, 0, 0], [10, 0, 0]]))
    assert g.patch_of.tolist() == [0]
    assert len(g.superpoints) == 1 and g.superpoints[0, 0] == 0


def test_empty_patches_are_dropped():
    g = group_points(np.array([[0.0, 0, 0], [0.15, 0, 0]]), np.array([[0.0, 0, 0], [50, 0, 0], [0.2, 0, 0]]))
    assert g.num_super == 2
    np.testing.assert_array_equal(g.superpoints, [[0, 0, 0], [0.2, 0, 0]])
    assert all(len(p) for p in g.patches)


def _check_partition(g):
    allidx = np.sort(np.concatenate(g.patches))
    assert np.array_equal(allidx, np.arange(g.num_dense))
    d = np.linalg.norm(g.dense_points[:, None] - g.superpoints[None], axis=2)
    assert np.array_equal(g.patch_of, np.argmin(d, axis=1))


@given(st.integers(0, 10_000))
def test_grouping_is_voronoi_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    dense = rng.uniform(-1, 1, (80, 3))
    supers = dense[rng.choice(80, 9, replace=False)]
    g = group_points(dense, supers)
    _check_partition(g)
    t = random_transform(rng)
    moved = group_points(t.apply(dense), t.apply(supers))
    assert np.array_equal(moved.patch_of, g.patch_of)


def test_built_graph_partition(rng):
    _check_partition(build_graph(rng.uniform(-1, 1, (700, 3)), 0.05, 0.3))


# --- transforms ------------------------------------------------------------


def test_identity_transform(rng):
    pts = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(apply_transform(pts, RigidTransform.identity()).points, pts)


def test_translation_of_origin():
    out = apply_transform(np.zeros((1, 3)), RigidTransform(np.eye(3), [1, 0, 0])).points
    np.testing.assert_array_equal(out, [[1, 0, 0]])


def test_quarter_turn_about_z():
    t = RigidTransform.from_axis_angle([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(t.apply([[1.0, 0, 0]]), [[0, 1, 0]], atol=1e-12)


@given(st.integers(0, 10_000))
def test_transform_algebra(seed):
    rng = np.random.default_rng(seed)
    a, b = random_transform(rng), random_transform(rng)
    assert a.is_valid() and a.compose(b).is_valid()
    pts = rng.normal(size=(4, 3))
    np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)
    np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)


def test_point_cloud_rejects_bad_input():
    with pytest.raises(DataError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(DataError):
        PointCloud(np.array([[np.nan, 0, 0]]))


# --- file formats ----------------------------------------------------------


def test_xyz_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(17, 3))
    write_xyz(tmp_path / "a.xyz", pts)
    assert read_points(tmp_path / "a.xyz").points.tobytes() == pts.tobytes()


def test_ply_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(17, 3)).astype(np.float32).astype(np.float64)
    write_ply(tmp_path / "a.ply", pts)
    np.testing.assert_array_equal(read_points(tmp_path / "a.ply").points, pts)


def test_transforms_roundtrip(tmp_path, rng):
    ts = [random_transform(rng) for _ in range(3)]
    write_transforms(tmp_path / "t.txt", ts)
    for a, b in zip(ts, read_transforms(tmp_path / "t.txt")):
        assert a.matrix().tobytes() == b.matrix().tobytes()
