import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_transform
from geotr import weights
from geotr.cloud import build_graph
from geotr.errors import DataError
from geotr.features import (
    DESCRIPTOR_DIM, HIST_BINS, FeatureProvider, compute_features, graph_descriptors, local_descriptors,
    lrf_neighbourhoods,
)
from geotr.synth import builtin_shape


@pytest.fixture(scope="module")
def graph():
    return build_graph(builtin_shape("bunny", seed=3, n=1500), 0.05, 0.3)


def test_descriptor_shape_and_ranges(graph):
    dense, sup = graph_descriptors(graph)
    assert dense.shape == (graph.num_dense, DESCRIPTOR_DIM)
    assert sup.shape == (graph.num_super, DESCRIPTOR_DIM)
    for d in (dense, sup):
        assert np.isfinite(d).all() and (d >= 0).all()
        hist = d[:, :HIST_BINS].sum(axis=1)
        assert np.all((np.abs(hist - 1) < 1e-12) | (hist == 0))


@given(st.integers(0, 1000))
def test_descriptor_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (150, 3))
    t = random_transform(rng)
    a = local_descriptors(pts, pts, 0.6, exclude_self=True)
    b = local_descriptors(t.apply(pts), t.apply(pts), 0.6, exclude_self=True)
    assert np.abs(a - b).max() < 1e-6


def test_congruent_graphs_equal_descriptors(graph, rng):
    t = random_transform(rng)
    a = graph_descriptors(graph)
    b = graph_descriptors(graph.transformed(t))
    for x, y in zip(a, b):
        assert np.abs(x - y).max() < 1e-6


def test_plane_vs_corner_eigen_channels():
    g = np.linspace(-1, 1, 9)
    plane = np.array([[x, y, 0.0] for x in g for y in g])
    corner = np.concatenate([
        [[x, y, 0.0] for x in g[4:] for y in g[4:]],
        [[x, 0.0, z] for x in g[4:] for z in g[5:]],
        [[0.0, y, z] for y in g[5:] for z in g[5:]],
    ])
    centre = np.zeros((1, 3))
    dp = local_descriptors(centre, plane, 1.0)[0, HIST_BINS:]
    dc = local_descriptors(centre, corner, 1.0)[0, HIST_BINS:]
    assert dp[2] < 1e-12  # flat: no spread along the normal
    assert dc[2] > 0.05
    assert np.abs(dp - dc).max() > 0.05


def test_builtin_provider_shapes(graph):
    compute_features(graph, FeatureProvider.builtin((16, 32), seed=1))
    assert graph.dense_features.shape == (graph.num_dense, 16)
    assert graph.superpoint_features.shape == (graph.num_super, 32)
    assert np.isfinite(graph.dense_features.value).all()


def test_encoder_provider_is_rigid_invariant(graph, rng):
    prov = FeatureProvider.builtin((16, 32), seed=1, encoder=True)
    a = compute_features(graph.transformed(random_transform(rng)), prov).dense_features.value
    b = compute_features(graph.transformed(random_transform(rng)), prov).dense_features.value
    assert a.shape == (graph.num_dense, 16)
    assert np.abs(a - b).max() < 1e-6


def test_lrf_coordinates_within_unit_ball(rng):
    pts = rng.uniform(-1, 1, (200, 3))
    coords, mask = lrf_neighbourhoods(pts, 0.5, 16)
    assert coords.shape == (200, 16, 3)
    assert (np.linalg.norm(coords[mask], axis=1) < 1 + 1e-12).all()
    assert (coords[~mask] == 0).all()


def test_file_provider_roundtrip(tmp_path, graph, rng):
    dense = rng.normal(size=(graph.num_dense, 5))
    sup = rng.normal(size=(graph.num_super, 7))
    weights.save(tmp_path / "f.bin", {"dense_feats": dense, "super_feats": sup})
    g = compute_features(graph.transformed(random_transform(rng)), FeatureProvider.from_file(tmp_path / "f.bin"))
    assert g.dense_features.value.tobytes() == dense.tobytes()
    assert g.superpoint_features.value.tobytes() == sup.tobytes()


@pytest.mark.parametrize("level,extra", [("dense", (1, 0)), ("superpoint", (0, 1))])
def test_file_provider_row_mismatch_names_level(tmp_path, graph, level, extra):
    weights.save(tmp_path / "f.bin", {
        "dense_feats": np.zeros((graph.num_dense + extra[0], 4)),
        "super_feats": np.zeros((graph.num_super + extra[1], 4)),
    })
    with pytest.raises(DataError, match=level):
        compute_features(graph.transformed(random_transform(np.random.default_rng(0))),
                         FeatureProvider.from_file(tmp_path / "f.bin"))


def test_file_provider_missing_entry(tmp_path):
    weights.save(tmp_path / "f.bin", {"dense_feats": np.zeros((2, 2))})
    with pytest.raises(DataError, match="super_feats"):
        FeatureProvider.from_file(tmp_path / "f.bin")
