"""Geometric transformer over superpoints.

Self-attention scores carry a transformation-invariant structure embedding
built from pair-wise distances and triplet-wise angles; cross-attention
exchanges features between the two clouds. Blocks are post-norm:
``LN(x + attn)`` then ``LN(h + FFN(h))`` with a 2x-wide ReLU feed-forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cloud import knn
from .errors import ConfigError, ParameterError

LEAKY_SLOPE = 0.01
SELF_ROLES = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class GeoEmbeddingConfig:
    sigma_d: float = 0.2
    sigma_a: float = 15.0  # degrees
    k_neighbors: int = 3
    d_t: int = 128

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise ConfigError(f"sigma_d must be positive, got {self.sigma_d}")
        if not self.sigma_a > 0:
            raise ConfigError(f"sigma_a must be positive, got {self.sigma_a}")
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.d_t <= 0 or self.d_t % 2:
            raise ConfigError(f"d_t must be a positive even number, got {self.d_t}")


def sinusoid(x: np.ndarray, d_t: int) -> np.ndarray:
    """Channels ``2k`` / ``2k+1`` hold ``sin`` / ``cos`` of ``x / 10000^(2k/d_t)``."""
    freq = 10000.0 ** (np.arange(0, d_t, 2, dtype=np.float64) / d_t)
    arg = x[..., None] / freq
    out = np.empty(x.shape + (d_t,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def pairwise_distances(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    dx = p[:, None, 0] - p[None, :, 0]
    dy = p[:, None, 1] - p[None, :, 1]
    dz = p[:, None, 2] - p[None, :, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def distance_embedding(supers, cfg: GeoEmbeddingConfig) -> np.ndarray:
    """``(M, M, d_t)`` sinusoid of ``rho_ij / sigma_d``."""
    rho = pairwise_distances(getattr(supers, "points", supers))
    return sinusoid(rho / cfg.sigma_d, cfg.d_t)


def neighbour_angles(points, k: int) -> np.ndarray:
    """``(M, M, k)`` angle between ``p_x - p_i`` and ``p_j - p_i`` for the k
    nearest neighbours ``x`` of ``i`` (self excluded). Zero-length edges give 0."""
    p = np.asarray(points, dtype=np.float64)
    m = len(p)
    idx, _ = knn(p, p, k + 1)
    nbrs = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        row = idx[i][idx[i] != i]
        nbrs[i] = row[:k]
    anchor = p[nbrs] - p[:, None, :]  # (M, k, 3): Δ_{x,i}
    ref = p[None, :, :] - p[:, None, :]  # (M, M, 3): Δ_{j,i}
    cross = np.cross(anchor[:, None, :, :], ref[:, :, None, :])
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.einsum("ixc,ijc->ijx", anchor, ref)
    return np.arctan2(sin, cos)


def angular_embedding(supers, cfg: GeoEmbeddingConfig) -> np.ndarray:
    """``(M, M, k, d_t)`` sinusoid of ``alpha / sigma_a``; diagonal rows are zero."""
    p = getattr(supers, "points", supers)
    m = len(p)
    if m <= cfg.k_neighbors:
        raise ParameterError(f"need more than k={cfg.k_neighbors} superpoints, got {m}")
    alpha = neighbour_angles(p, cfg.k_neighbors)
    out = sinusoid(alpha / math.radians(cfg.sigma_a), cfg.d_t)
    diag = np.arange(m)
    out[diag, diag] = 0.0
    return out


def structure_embedding(points, cfg: GeoEmbeddingConfig):
    """Distance and angular embeddings for one cloud.

    ``k`` is clamped to ``M - 1`` for tiny clouds; a single superpoint gets
    an all-zero angular block.
    """
    m = len(points)
    dist = distance_embedding(points, cfg)
    k = min(cfg.k_neighbors, m - 1)
    if k < 1:
        ang = np.zeros((m, m, 1, cfg.d_t))
    else:
        sub = GeoEmbeddingConfig(cfg.sigma_d, cfg.sigma_a, k, cfg.d_t)
        ang = angular_embedding(points, sub)
    return dist, ang


def cached_structure_embedding(graph, cfg: GeoEmbeddingConfig):
    key = ("structure_embedding", cfg)
    hit = graph.meta.get(key)
    if hit is None:
        hit = graph.meta[key] = structure_embedding(graph.superpoints, cfg)
    return hit


def aggregate_embedding(dist_emb, ang_emb, w_d, w_a) -> ad.Tensor:
    """``r^D W^D + max_x (r^A_x W^A)``, max taken channel-wise over neighbours."""
    return ad.add(ad.matmul(dist_emb, w_d), ad.max_(ad.matmul(ang_emb, w_a), axis=2))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformerConfig:
    d_in: int = 128
    d_t: int = 128
    heads: int = 4
    n_layers: int = 3
    mode: str = "standard"  # or "shared"
    geometric: bool = True

    def __post_init__(self):
        if self.d_t % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide d_t={self.d_t}")
        if self.mode not in ("standard", "shared"):
            raise ConfigError(f"unknown attention mode {self.mode!r}")


def _block_params(rng, d, prefix, with_wr):
    s = 1.0 / math.sqrt(d)
    out = {}
    for role in SELF_ROLES:
        out[f"{prefix}.{role}"] = rng.normal(0, s, (d, d))
    if with_wr:
        out[f"{prefix}.wr"] = rng.normal(0, s, (d, d))
    out[f"{prefix}.ln1.g"] = np.ones(d)
    out[f"{prefix}.ln1.b"] = np.zeros(d)
    out[f"{prefix}.ffn.w1"] = rng.normal(0, s, (d, 2 * d))
    out[f"{prefix}.ffn.b1"] = np.zeros(2 * d)
    out[f"{prefix}.ffn.w2"] = rng.normal(0, 1.0 / math.sqrt(2 * d), (2 * d, d))
    out[f"{prefix}.ffn.b2"] = np.zeros(d)
    out[f"{prefix}.ln2.g"] = np.ones(d)
    out[f"{prefix}.ln2.b"] = np.zeros(d)
    return out


def init_transformer(rng, cfg: TransformerConfig) -> dict[str, ad.Tensor]:
    """Parameters named ``in_proj.*``, ``embed.*`` and ``layer{i}.{self,cross}.*``."""
    d = cfg.d_t
    raw = {
        "in_proj.w": rng.normal(0, 1.0 / math.sqrt(cfg.d_in), (cfg.d_in, d)),
        "in_proj.b": np.zeros(d),
    }
    if cfg.geometric:
        raw["embed.wd"] = rng.normal(0, 1.0 / math.sqrt(d), (d, d))
        raw["embed.wa"] = rng.normal(0, 1.0 / math.sqrt(d), (d, d))
        if cfg.mode == "shared":
            raw["embed.wr"] = rng.normal(0, 1.0 / math.sqrt(d), (d, d))
    for i in range(cfg.n_layers):
        raw.update(_block_params(rng, d, f"layer{i}.self", cfg.geometric and cfg.mode == "standard"))
        raw.update(_block_params(rng, d, f"layer{i}.cross", False))
    return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def layer_view(params, prefix):
    """Strip ``prefix.`` from matching names: the per-block parameter dict."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# attention blocks
# ---------------------------------------------------------------------------


def _split_heads(x, heads):
    rows, d = x.shape
    return ad.reshape(x, (rows, heads, d // heads))


def _block(x, attended, p):
    """Output projection, residual + norm, feed-forward, residual + norm."""
    h = ad.layer_norm(ad.add(x, ad.matmul(attended, p["wo"])), p["ln1.g"], p["ln1.b"])
    f = ad.linear(ad.relu(ad.linear(h, p["ffn.w1"], p["ffn.b1"])), p["ffn.w2"], p["ffn.b2"])
    return ad.layer_norm(ad.add(h, f), p["ln2.g"], p["ln2.b"])


def _attend(x_query, x_kv, p, heads, geo=None):
    m, d = x_query.shape
    dh = d // heads
    q = _split_heads(ad.matmul(x_query, p["wq"]), heads)
    k = _split_heads(ad.matmul(x_kv, p["wk"]), heads)
    v = _split_heads(ad.matmul(x_kv, p["wv"]), heads)
    scores = ad.einsum("ihc,jhc->hij", q, k)
    if geo is not None:
        n = x_kv.shape[0]
        scores = ad.add(scores, ad.einsum("ihc,ijhc->hij", q, ad.reshape(geo, (m, n, heads, dh))))
    attn = ad.softmax(ad.mul(scores, 1.0 / math.sqrt(dh)), axis=-1)
    z = ad.einsum("hij,jhc->ihc", attn, v)
    return ad.reshape(z, (m, d))


def geometric_self_attention(x, r, params, mode: str = "standard", heads: int = 4) -> ad.Tensor:
    """One self-attention block with the structure term in the scores.

    ``standard``: ``r`` is the aggregated embedding and is projected by this
    block's ``wr``. ``shared``: ``r`` is already projected (LeakyReLU then the
    global ``W^R``) and enters the scores as is. ``r=None`` gives vanilla
    self-attention.
    """
    x = ad.as_tensor(x)
    if x.shape[1] % heads:
        raise ConfigError(f"{heads} heads do not divide width {x.shape[1]}")
    geo = None
    if r is not None:
        if mode == "standard":
            geo = ad.matmul(r, params["wr"])
        elif mode == "shared":
            geo = ad.as_tensor(r)
        else:
            raise ConfigError(f"unknown attention mode {mode!r}")
    return _block(x, _attend(x, x, params, heads, geo), params)


def cross_attention(xp, xq, params, heads: int = 4) -> ad.Tensor:
    """Update ``xp`` from ``xq`` by feature-correlation attention."""
    xp, xq = ad.as_tensor(xp), ad.as_tensor(xq)
    if xp.shape[1] != xq.shape[1]:
        raise ConfigError(f"cross-attention widths differ: {xp.shape[1]} vs {xq.shape[1]}")
    if xp.shape[1] % heads:
        raise ConfigError(f"{heads} heads do not divide width {xp.shape[1]}")
    return _block(xp, _attend(xp, xq, params, heads), params)


def shared_projection(r, w_r) -> ad.Tensor:
    return ad.matmul(ad.leaky_relu(r, LEAKY_SLOPE), w_r)


def geometric_score_term(q, r, w_r, mode: str, heads: int) -> np.ndarray:
    """Geometric part of one layer's scores, for cost measurements.

    Standard mode projects the embedding by ``w_r`` inside the layer; shared
    mode consumes an embedding projected once up front.
    """
    m, d = q.shape
    dh = d // heads
    qh = q.reshape(m, heads, dh)
    geo = r @ w_r if mode == "standard" else r
    return np.einsum("ihc,ijhc->hij", qh, geo.reshape(m, m, heads, dh), optimize=True)


def run_transformer(graph_p, graph_q, params, embed_cfg: GeoEmbeddingConfig, cfg: TransformerConfig,
                    n_layers: int | None = None):
    """Interleave self (P), self (Q), then simultaneous cross P<-Q / Q<-P.

    Structure embeddings are computed once per cloud and reused by every
    layer. Returns the two hybrid feature matrices.
    """
    n_layers = cfg.n_layers if n_layers is None else n_layers
    xp = ad.linear(graph_p.superpoint_features, params["in_proj.w"], params["in_proj.b"])
    xq = ad.linear(graph_q.superpoint_features, params["in_proj.w"], params["in_proj.b"])
    rp = rq = None
    if cfg.geometric and n_layers > 0:
        rp = aggregate_embedding(*cached_structure_embedding(graph_p, embed_cfg), params["embed.wd"], params["embed.wa"])
        rq = aggregate_embedding(*cached_structure_embedding(graph_q, embed_cfg), params["embed.wd"], params["embed.wa"])
        if cfg.mode == "shared":
            rp = shared_projection(rp, params["embed.wr"])
            rq = shared_projection(rq, params["embed.wr"])
    for i in range(n_layers):
        sp = layer_view(params, f"layer{i}.self")
        cp = layer_view(params, f"layer{i}.cross")
        xp = geometric_self_attention(xp, rp, sp, cfg.mode, cfg.heads)
        xq = geometric_self_attention(xq, rq, sp, cfg.mode, cfg.heads)
        xp, xq = cross_attention(xp, xq, cp, cfg.heads), cross_attention(xq, xp, cp, cfg.heads)
    return xp, xq
