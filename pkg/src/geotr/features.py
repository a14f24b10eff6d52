"""Rigid-invariant stand-in for a learned backbone.

Each point gets an 11-channel descriptor (8-bin neighbour-distance histogram
plus 3 sorted covariance eigenvalue ratios) computed from neighbours within
``2.5 x`` the level's voxel size, followed by a learnable linear lift to the
feature width of that level.

``encoder`` mode adds a small learned point encoder on the dense level: the
neighbours within ``6 x`` the dense voxel are expressed in a local reference
frame (weighted covariance axes with majority-vote signs), passed through a
shared two-layer perceptron and max-pooled; the pooled vector is concatenated
with the descriptor before the lift.

``file`` mode reads matrices from a weights file with entries
``dense_feats`` and ``super_feats``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import weights
from .cloud import SuperpointGraph, radius_search
from .errors import ConfigError, DataError

DESCRIPTOR_DIM = 11
HIST_BINS = 8
RADIUS_SCALE = 2.5
ENCODER_RADIUS_SCALE = 6.0
ENCODER_NEIGHBOURS = 48
ENCODER_WIDTH = 64
MODES = ("builtin", "encoder", "file")


def local_descriptors(queries, neighbours, radius: float, exclude_self: bool = False) -> np.ndarray:
    """Distance histogram and covariance eigenvalue ratios per query point.

    With ``exclude_self`` the query set must equal the neighbour set and each
    point's own index is skipped.
    """
    queries = np.asarray(queries, dtype=np.float64)
    neighbours = np.asarray(neighbours, dtype=np.float64)
    offsets, idx, dist = radius_search(queries, neighbours, radius)
    out = np.zeros((len(queries), DESCRIPTOR_DIM))
    edges = np.linspace(0.0, radius, HIST_BINS + 1)
    for i in range(len(queries)):
        sl = slice(offsets[i], offsets[i + 1])
        nb, d = idx[sl], dist[sl]
        if exclude_self:
            keep = nb != i
            nb, d = nb[keep], d[keep]
        if len(nb) == 0:
            continue
        hist = np.histogram(d, bins=edges)[0]
        out[i, :HIST_BINS] = hist / len(nb)
        pts = np.vstack([queries[i : i + 1], neighbours[nb]])
        centred = pts - pts.mean(axis=0)
        cov = centred.T @ centred / len(pts)
        lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
        total = lam.sum()
        if total > 0:
            out[i, HIST_BINS:] = lam / total
    return out


def graph_descriptors(graph: SuperpointGraph) -> tuple[np.ndarray, np.ndarray]:
    """Dense-level and superpoint-level descriptors, cached on the graph."""
    cached = graph.meta.get("descriptors")
    if cached is not None:
        return cached
    dense_r = RADIUS_SCALE * graph.meta["dense_voxel"]
    super_r = RADIUS_SCALE * graph.meta["super_voxel"]
    dense = local_descriptors(graph.dense_points, graph.dense_points, dense_r, exclude_self=True)
    sup = local_descriptors(graph.superpoints, graph.dense_points, super_r)
    graph.meta["descriptors"] = (dense, sup)
    return dense, sup


def local_frame(offsets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Rows are the frame axes: major, middle, normal (right-handed).

    Axes come from the weighted covariance of ``offsets``; the major and
    normal axes point toward the weighted majority of the offsets.
    """
    cov = (offsets * weights[:, None]).T @ offsets / weights.sum()
    _, vecs = np.linalg.eigh(cov)
    major, normal = vecs[:, 2], vecs[:, 0]
    if (offsets @ major * weights).sum() < 0:
        major = -major
    if (offsets @ normal * weights).sum() < 0:
        normal = -normal
    return np.stack([major, np.cross(normal, major), normal])


def lrf_neighbourhoods(points, radius: float, max_neighbours: int = ENCODER_NEIGHBOURS):
    """``(N, K, 3)`` neighbour offsets in each point's local frame, scaled by
    ``1 / radius``, plus the ``(N, K)`` validity mask. The nearest
    ``max_neighbours`` within ``radius`` are kept; the point itself is included."""
    points = np.asarray(points, dtype=np.float64)
    offsets, idx, dist = radius_search(points, points, radius)
    coords = np.zeros((len(points), max_neighbours, 3))
    mask = np.zeros((len(points), max_neighbours), dtype=bool)
    for i in range(len(points)):
        sl = slice(offsets[i], offsets[i + 1])
        nb = idx[sl][:max_neighbours]
        d = points[nb] - points[i]
        w = radius - dist[sl][:max_neighbours]
        if len(nb) >= 3:
            coords[i, : len(nb)] = d @ local_frame(d, w).T / radius
        mask[i, : len(nb)] = True
    return coords, mask


def graph_neighbourhoods(graph: SuperpointGraph):
    cached = graph.meta.get("lrf")
    if cached is None:
        radius = ENCODER_RADIUS_SCALE * graph.meta["dense_voxel"]
        cached = graph.meta["lrf"] = lrf_neighbourhoods(graph.dense_points, radius)
    return cached


def encode_points(coords, mask, p) -> ad.Tensor:
    """Shared perceptron over neighbour coordinates, max-pooled per point."""
    h = ad.relu(ad.linear(coords, p["enc.w1"], p["enc.b1"]))
    h = ad.linear(h, p["enc.w2"], p["enc.b2"])
    h = ad.where(mask[..., None], h, -1e9)
    return ad.relu(ad.max_(h, axis=1))


@dataclass
class FeatureProvider:
    """Where dense and superpoint features come from.

    ``mode`` is ``"builtin"`` (descriptor + lift held in ``params``),
    ``"encoder"`` (builtin plus the dense-level point encoder) or ``"file"``
    (matrices loaded from a weights file).
    """

    mode: str = "builtin"
    dims: tuple[int, int] = (64, 128)
    params: dict = field(default_factory=dict)
    loaded: dict | None = None

    @classmethod
    def builtin(cls, dims=(64, 128), seed: int = 0, encoder: bool = False):
        rng = np.random.default_rng(seed)
        width = ENCODER_WIDTH if encoder else 0
        return cls("encoder" if encoder else "builtin", tuple(dims), init_lift(rng, dims, width))

    @classmethod
    def from_file(cls, path):
        entries = weights.load(path)
        missing = {"dense_feats", "super_feats"} - set(entries)
        if missing:
            raise DataError(f"{path}: missing entries {sorted(missing)}")
        dims = (entries["dense_feats"].shape[1], entries["super_feats"].shape[1])
        return cls("file", dims, {}, entries)


def init_lift(rng, dims, encoder_width: int = 0) -> dict[str, ad.Tensor]:
    """Lift parameters; a positive ``encoder_width`` adds the point encoder."""
    d_dense, d_super = dims
    d_in = DESCRIPTOR_DIM + encoder_width
    raw = {
        "lift.dense.w": rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_dense)),
        "lift.dense.b": rng.normal(0, 0.1, d_dense),
        "lift.super.w": rng.normal(0, 1.0 / np.sqrt(DESCRIPTOR_DIM), (DESCRIPTOR_DIM, d_super)),
        "lift.super.b": rng.normal(0, 0.1, d_super),
    }
    if encoder_width:
        h = encoder_width
        raw["enc.w1"] = rng.normal(0, 1.0 / np.sqrt(3), (3, h))
        raw["enc.b1"] = np.zeros(h)
        raw["enc.w2"] = rng.normal(0, 1.0 / np.sqrt(h), (h, h))
        raw["enc.b2"] = np.zeros(h)
    return {k: ad.Tensor(v, True, k) for k, v in raw.items()}


def compute_features(graph: SuperpointGraph, provider: FeatureProvider) -> SuperpointGraph:
    """Fill ``dense_features`` and ``superpoint_features`` on ``graph``.

    Row order follows the graph's point order. Builtin features are tape
    tensors so the lift trains with the rest of the model.
    """
    if not graph.patches:
        raise DataError("graph has no patches")
    if provider.mode in ("builtin", "encoder"):
        dense, sup = graph_descriptors(graph)
        p = provider.params
        if provider.mode == "encoder":
            dense = ad.concat([ad.Tensor(dense), encode_points(*graph_neighbourhoods(graph), p)], axis=1)
        graph.dense_features = ad.linear(dense, p["lift.dense.w"], p["lift.dense.b"])
        graph.superpoint_features = ad.linear(sup, p["lift.super.w"], p["lift.super.b"])
    elif provider.mode == "file":
        dense = provider.loaded["dense_feats"]
        sup = provider.loaded["super_feats"]
        if dense.shape[0] != graph.num_dense:
            raise DataError(f"dense level: file has {dense.shape[0]} rows, graph has {graph.num_dense} points")
        if sup.shape[0] != graph.num_super:
            raise DataError(
                f"superpoint level: file has {sup.shape[0]} rows, graph has {graph.num_super} superpoints"
            )
        if not (np.isfinite(dense).all() and np.isfinite(sup).all()):
            raise DataError("loaded features contain non-finite values")
        graph.dense_features = ad.Tensor(dense)
        graph.superpoint_features = ad.Tensor(sup)
    else:
        raise ConfigError(f"unknown feature mode {provider.mode!r}")
    return graph
