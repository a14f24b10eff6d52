import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_transform
from geotr import autodiff as ad
from geotr.attention import (
    GeoEmbeddingConfig, TransformerConfig, aggregate_embedding, angular_embedding, cross_attention,
    distance_embedding, geometric_self_attention, init_transformer, layer_view, run_transformer,
    shared_projection, structure_embedding,
)
from geotr.cloud import build_graph, group_points
from geotr.errors import ConfigError, ParameterError
from geotr.features import FeatureProvider, compute_features
from geotr.matching import superpoint_match
from geotr.synth import builtin_shape

INSTANCES = range(20)


def block_params(rng, d, with_wr=True):
    raw = {r: rng.normal(0, 1 / math.sqrt(d), (d, d)) for r in ("wq", "wk", "wv", "wo", "wr")}
    if not with_wr:
        del raw["wr"]
    raw.update({
        "ln1.g": rng.uniform(0.5, 1.5, d), "ln1.b": rng.normal(0, 0.1, d),
        "ffn.w1": rng.normal(0, 1 / math.sqrt(d), (d, 2 * d)), "ffn.b1": rng.normal(0, 0.1, 2 * d),
        "ffn.w2": rng.normal(0, 1 / math.sqrt(2 * d), (2 * d, d)), "ffn.b2": rng.normal(0, 0.1, d),
        "ln2.g": rng.uniform(0.5, 1.5, d), "ln2.b": rng.normal(0, 0.1, d),
    })
    return raw


def _layer_norm_rows(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = math.fsum(row) / len(row)
        var = math.fsum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * gc + bc for v, gc, bc in zip(row, g, b)]
    return out


def manual_block(x, ctx, p, heads, geo=None):
    """Scores, softmax and weighted sums spelled out element by element."""
    m, d = x.shape
    n = ctx.shape[0]
    dh = d // heads
    q, k, v = x @ p["wq"], ctx @ p["wk"], ctx @ p["wv"]
    z = np.zeros((m, d))
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(m):
            scores = []
            for j in range(n):
                s = 0.0
                for c in cols:
                    key = k[j, c] + (geo[i, j, c] if geo is not None else 0.0)
                    s += q[i, c] * key
                scores.append(s / math.sqrt(dh))
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            total = sum(w)
            for c in cols:
                z[i, c] = sum(w[j] / total * v[j, c] for j in range(n))
    h1 = _layer_norm_rows(x + z @ p["wo"], p["ln1.g"], p["ln1.b"])
    f = np.maximum(h1 @ p["ffn.w1"] + p["ffn.b1"], 0) @ p["ffn.w2"] + p["ffn.b2"]
    return _layer_norm_rows(h1 + f, p["ln2.g"], p["ln2.b"])


# --- embeddings ------------------------------------------------------------


def test_distance_embedding_diagonal():
    emb = distance_embedding(np.random.default_rng(0).normal(size=(5, 3)), GeoEmbeddingConfig(d_t=8))
    diag = emb[np.arange(5), np.arange(5)]
    assert np.all(diag[:, 0::2] == 0) and np.all(diag[:, 1::2] == 1)


def test_distance_embedding_at_sigma():
    emb = distance_embedding(np.array([[0.0, 0, 0], [0.2, 0, 0]]), GeoEmbeddingConfig(sigma_d=0.2, d_t=8))
    np.testing.assert_allclose(emb[0, 1, :2], [0.8414709848078965, 0.5403023058681398], atol=1e-15)
    np.testing.assert_array_equal(emb[0, 1], emb[1, 0])


def test_distance_embedding_channels():
    rho = 0.37
    cfg = GeoEmbeddingConfig(sigma_d=0.1, d_t=6)
    emb = distance_embedding(np.array([[0.0, 0, 0], [rho, 0, 0]]), cfg)[0, 1]
    for kk in range(3):
        arg = (rho / 0.1) / 10000 ** (2 * kk / 6)
        assert emb[2 * kk] == pytest.approx(math.sin(arg), abs=1e-13)
        assert emb[2 * kk + 1] == pytest.approx(math.cos(arg), abs=1e-13)


def test_angular_collinear_same_side():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    emb = angular_embedding(pts, GeoEmbeddingConfig(k_neighbors=1, d_t=4))
    np.testing.assert_allclose(emb[0, 2, 0], [0, 1, 0, 1], atol=1e-15)


def test_angular_right_angle():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    emb = angular_embedding(pts, GeoEmbeddingConfig(sigma_a=15.0, k_neighbors=1, d_t=4))
    np.testing.assert_allclose(emb[0, 2, 0, :2], [math.sin(6), math.cos(6)], atol=1e-12)


def test_angular_diagonal_is_zero(rng):
    emb = angular_embedding(rng.normal(size=(6, 3)), GeoEmbeddingConfig(d_t=4))
    assert np.all(emb[np.arange(6), np.arange(6)] == 0)


def test_angular_needs_more_points_than_k():
    with pytest.raises(ParameterError):
        angular_embedding(np.zeros((3, 3)) + np.arange(3)[:, None], GeoEmbeddingConfig(k_neighbors=3, d_t=4))


@given(st.integers(0, 10_000))
def test_structure_embedding_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (12, 3))
    cfg = GeoEmbeddingConfig(d_t=8)
    d1, a1 = structure_embedding(pts, cfg)
    d2, a2 = structure_embedding(random_transform(rng).apply(pts), cfg)
    assert np.abs(d1 - d2).max() < 1e-9 and np.abs(a1 - a2).max() < 1e-9


def test_aggregate_single_neighbour_is_identity(rng):
    dist, ang = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 1, 4))
    w_d, w_a = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(aggregate_embedding(dist, ang, w_d, w_a).value, dist @ w_d + ang[:, :, 0] @ w_a)


def test_aggregate_zero_angular_branch(rng):
    dist, ang = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 2, 4))
    out = aggregate_embedding(dist, ang, np.eye(4), np.zeros((4, 4))).value
    np.testing.assert_array_equal(out, dist)


def test_aggregate_channelwise_max(rng):
    dist, ang = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 3, 4))
    w_a = rng.normal(size=(4, 4))
    out = aggregate_embedding(dist, ang, np.zeros((4, 4)), w_a).value
    for i in range(2):
        for j in range(2):
            for c in range(4):
                best = max(sum(ang[i, j, x, e] * w_a[e, c] for e in range(4)) for x in range(3))
                assert out[i, j, c] == pytest.approx(best, abs=1e-12)


# --- attention blocks ------------------------------------------------------


def test_self_attention_single_token(rng):
    p = block_params(rng, 4)
    x = rng.normal(size=(1, 4))
    out = geometric_self_attention(x, rng.normal(size=(1, 1, 4)), p, "standard", 2).value
    np.testing.assert_allclose(out, manual_block(x, x, p, 2, None), atol=1e-12)


def test_zero_embedding_is_vanilla(rng):
    p = block_params(rng, 8)
    p["wr"] = np.zeros((8, 8))
    x = rng.normal(size=(5, 8))
    geo = geometric_self_attention(x, np.zeros((5, 5, 8)), p, "standard", 2).value
    vanilla = geometric_self_attention(x, None, p, "standard", 2).value
    np.testing.assert_array_equal(geo, vanilla)


@pytest.mark.parametrize("mode", ["standard", "shared"])
def test_self_attention_matches_manual(rng, mode):
    p = block_params(rng, 8)
    x, r = rng.normal(size=(3, 8)), rng.normal(size=(3, 3, 8))
    out = geometric_self_attention(x, r, p, mode, 2).value
    geo = r @ p["wr"] if mode == "standard" else r
    np.testing.assert_allclose(out, manual_block(x, x, p, 2, geo), atol=1e-12)


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        geometric_self_attention(rng.normal(size=(3, 6)), None, block_params(rng, 6), "standard", 4)
    with pytest.raises(ConfigError):
        TransformerConfig(d_t=10, heads=4)


def test_cross_attention_single_key(rng):
    p = block_params(rng, 4, with_wr=False)
    xp, xq = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    out = cross_attention(xp, xq, p, 2).value
    np.testing.assert_allclose(out, manual_block(xp, xq, p, 2), atol=1e-12)


def test_cross_attention_with_itself_is_vanilla_self_attention(rng):
    p = block_params(rng, 8)
    x = rng.normal(size=(4, 8))
    np.testing.assert_array_equal(cross_attention(x, x, p, 2).value, geometric_self_attention(x, None, p, "standard", 2).value)


def test_cross_attention_matches_manual(rng):
    p = block_params(rng, 6, with_wr=False)
    xp, xq = rng.normal(size=(2, 6)), rng.normal(size=(3, 6))
    np.testing.assert_allclose(cross_attention(xp, xq, p, 3).value, manual_block(xp, xq, p, 3), atol=1e-12)


def test_cross_attention_width_mismatch(rng):
    with pytest.raises(ConfigError):
        cross_attention(rng.normal(size=(2, 4)), rng.normal(size=(2, 6)), block_params(rng, 4), 2)


# --- gradients -------------------------------------------------------------


def _weighted(out):
    w = np.cos(np.arange(out.value.size)).reshape(out.shape)
    return (out * ad.Tensor(w)).sum()


def standard_attention_grad_error(seed):
    rng = np.random.default_rng(seed)
    p = block_params(rng, 4)

    def fn(x, r, wq, wr):
        q = dict(p, wq=wq, wr=wr)
        return _weighted(geometric_self_attention(x, r, q, "standard", 2))

    return ad.gradient_error(fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 3, 4)), p["wq"], p["wr"]])


def shared_attention_grad_error(seed):
    rng = np.random.default_rng(seed)
    p = block_params(rng, 4, with_wr=False)

    def fn(x, r, w_r, wk):
        return _weighted(geometric_self_attention(x, shared_projection(r, w_r), dict(p, wk=wk), "shared", 2))

    return ad.gradient_error(fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 3, 4)), rng.normal(size=(4, 4)), p["wk"]])


def cross_attention_grad_error(seed):
    rng = np.random.default_rng(seed)
    p = block_params(rng, 4, with_wr=False)

    def fn(xp, xq, wv, w1):
        return _weighted(cross_attention(xp, xq, dict(p, wv=wv, **{"ffn.w1": w1}), 2))

    return ad.gradient_error(fn, [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), p["wv"], p["ffn.w1"]])


def aggregation_grad_error(seed):
    rng = np.random.default_rng(seed)
    dist, ang = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 2, 4))

    def fn(w_d, w_a):
        return _weighted(aggregate_embedding(dist, ang, w_d, w_a))

    return ad.gradient_error(fn, [rng.normal(size=(4, 4)), rng.normal(size=(4, 4))])


GRADIENT_CASES = {
    "standard self-attention": standard_attention_grad_error,
    "shared self-attention": shared_attention_grad_error,
    "cross-attention": cross_attention_grad_error,
    "embedding aggregation": aggregation_grad_error,
}


@pytest.mark.parametrize("name", GRADIENT_CASES)
@pytest.mark.parametrize("seed", INSTANCES)
def test_attention_gradients(name, seed):
    assert GRADIENT_CASES[name](seed) < 1e-4


# --- full stack ------------------------------------------------------------


def _graph(seed, n=500):
    return build_graph(builtin_shape("composite", seed=seed, n=n), 0.05, 0.3)


@pytest.fixture(scope="module")
def pair_graphs():
    return _graph(1), _graph(2)


def _stack(mode="standard", d=16, layers=2, seed=0, geometric=True):
    cfg = TransformerConfig(32, d, 4, layers, mode, geometric)
    rng = np.random.default_rng(seed)
    return cfg, init_transformer(rng, cfg), FeatureProvider.builtin((16, 32), seed=seed)


def _run(gp, gq, mode="standard", layers=2, n_layers=None):
    cfg, params, prov = _stack(mode, layers=layers)
    compute_features(gp, prov)
    compute_features(gq, prov)
    return run_transformer(gp, gq, params, GeoEmbeddingConfig(0.3, 15.0, 3, cfg.d_t), cfg, n_layers)


def test_zero_layers_give_projected_inputs(pair_graphs):
    gp, gq = pair_graphs
    cfg, params, _ = _stack()
    hp, _ = _run(gp, gq, n_layers=0)
    lifted = gp.superpoint_features.value
    np.testing.assert_allclose(hp.value, lifted @ params["in_proj.w"].value + params["in_proj.b"].value)


@pytest.mark.parametrize("mode", ["standard", "shared"])
def test_swapping_clouds_swaps_outputs(pair_graphs, mode):
    gp, gq = pair_graphs
    hp, hq = _run(gp, gq, mode)
    hq2, hp2 = _run(gq, gp, mode)
    assert np.array_equal(hp.value, hp2.value) and np.array_equal(hq.value, hq2.value)


def test_random_clouds_shapes_finite():
    rng = np.random.default_rng(5)
    graphs = []
    for m in (30, 40):
        dense = rng.uniform(-1, 1, (400, 3))
        g = group_points(dense, dense[rng.choice(400, m, replace=False)])
        g.meta.update(dense_voxel=0.1, super_voxel=0.4)
        graphs.append(g)
    gp, gq = graphs
    assert (gp.num_super, gq.num_super) == (30, 40)
    hp, hq = _run(gp, gq)
    assert hp.shape == (gp.num_super, 16) and hq.shape == (gq.num_super, 16)
    assert np.isfinite(hp.value).all() and np.isfinite(hq.value).all()


def test_structure_embedding_cached_per_graph(pair_graphs):
    gp, gq = pair_graphs
    _run(gp, gq)
    keys = [k for k in gp.meta if isinstance(k, tuple) and k[0] == "structure_embedding"]
    assert len(keys) == 1


def test_parameter_names():
    _, params, _ = _stack("standard", layers=2)
    assert "layer1.self.wr" in params and "layer0.cross.wq" in params
    _, shared, _ = _stack("shared", layers=2)
    assert "embed.wr" in shared and "layer0.self.wr" not in shared
    assert set(layer_view(params, "layer0.self")) >= {"wq", "wk", "wv", "wo", "wr"}


def hybrid_invariance(gp, gq, mode, seed):
    """Worst feature change and whether the superpoint matches agree, for two random motions of each cloud."""
    rng = np.random.default_rng(seed)
    hp, hq = _run(gp.transformed(random_transform(rng)), gq.transformed(random_transform(rng)), mode)
    hp2, hq2 = _run(gp.transformed(random_transform(rng)), gq.transformed(random_transform(rng)), mode)
    err = max(np.abs(hp.value - hp2.value).max(), np.abs(hq.value - hq2.value).max())
    a = superpoint_match(hp.value, hq.value, 32)
    b = superpoint_match(hp2.value, hq2.value, 32)
    return err, set(map(tuple, a.pairs)) == set(map(tuple, b.pairs))


@pytest.mark.parametrize("mode", ["standard", "shared"])
@pytest.mark.parametrize("seed", range(3))
def test_hybrid_features_invariant_to_independent_rigid_motions(pair_graphs, mode, seed):
    err, same = hybrid_invariance(*pair_graphs, mode, seed)
    assert err < 1e-5 and same
