"""Rigid pose estimation from point correspondences.

``weighted_svd`` is the closed-form Kabsch solve. ``local_to_global``
hypothesises one pose per superpoint match, keeps the one with the most
inliers over all correspondences and refines it. ``ransac_estimate`` is the
classic 3-point baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .cloud import RigidTransform
from .errors import ConfigError, EstimationError


@dataclass(frozen=True)
class EstimatorConfig:
    tau_a: float = 0.1
    n_refine: int = 5
    min_local_corr: int = 3
    ransac_iters: int = 50000
    svd_top: int = 250

    def __post_init__(self):
        if not self.tau_a > 0:
            raise ConfigError(f"tau_a must be positive, got {self.tau_a}")
        if self.n_refine < 0:
            raise ConfigError(f"n_refine must be >= 0, got {self.n_refine}")
        if self.min_local_corr < 3:
            raise ConfigError("min_local_corr must be at least 3")
        if self.ransac_iters < 1:
            raise ConfigError("ransac_iters must be positive")


def _pts(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)


def weighted_svd(src, dst, weights=None) -> RigidTransform:
    """Pose minimising ``sum_j w_j |R src_j + t - dst_j|^2``."""
    src, dst = _pts(src), _pts(dst)
    if len(src) != len(dst):
        raise EstimationError(f"{len(src)} source points vs {len(dst)} target points")
    if len(src) < 3:
        raise EstimationError(f"need at least 3 pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise EstimationError("weights must be finite and nonnegative")
    if not w.sum() > 0:
        raise EstimationError("weights sum to zero")
    rot, t, ok = _backend.kernels.kabsch(src, dst, w)
    if not ok:
        raise EstimationError("cross-covariance is rank deficient", degenerate=True)
    return RigidTransform(rot, t)


def residuals(src, dst, transform: RigidTransform) -> np.ndarray:
    return np.linalg.norm(transform.apply(src) - _pts(dst), axis=1)


def count_inliers(src, dst, transform: RigidTransform, tau_a: float) -> int:
    counts, _ = _backend.kernels.count_inliers_many(
        _pts(src), _pts(dst), transform.rotation[None], transform.translation[None], float(tau_a)
    )
    return int(counts[0])


@dataclass
class LGRResult:
    transform: RigidTransform
    inliers: np.ndarray  # indices into the correspondence arrays
    candidate_group: int
    inlier_history: list[int] = field(default_factory=list)
    num_candidates: int = 0


def local_candidates(src, dst, scores, group_of, min_local_corr: int = 3):
    """One weighted-SVD pose per group with enough pairs; degenerate groups skipped."""
    group_of = np.asarray(group_of)
    rots, ts, ids = [], [], []
    for g in np.unique(group_of):
        sel = np.nonzero(group_of == g)[0]
        if len(sel) < min_local_corr:
            continue
        rot, t, ok = _backend.kernels.kabsch(src[sel], dst[sel], scores[sel])
        if ok:
            rots.append(rot)
            ts.append(t)
            ids.append(int(g))
    return rots, ts, ids


def local_to_global(src, dst, scores, group_of, cfg: EstimatorConfig = EstimatorConfig()) -> LGRResult:
    """Local-to-global registration.

    Candidates are compared by inlier count over all pairs; ties go to the
    smaller mean inlier residual, then the lower group id. Each refinement
    round re-solves on the inliers of the current pose with unit weights;
    a round that would lower the inlier count is rejected and refinement
    stops there.
    """
    src, dst = _pts(src), _pts(dst)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    rots, ts, ids = local_candidates(src, dst, scores, group_of, cfg.min_local_corr)
    if not rots:
        raise EstimationError("no group yields a local pose candidate")
    counts, sums = _backend.kernels.count_inliers_many(
        src, dst, np.ascontiguousarray(rots), np.ascontiguousarray(ts), float(cfg.tau_a)
    )
    mean_res = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    order = np.lexsort((np.arange(len(ids)), mean_res, -counts))
    best = int(order[0])
    transform = RigidTransform(rots[best], ts[best])
    mask = residuals(src, dst, transform) < cfg.tau_a
    history = [int(mask.sum())]
    for _ in range(cfg.n_refine):
        if mask.sum() < 3:
            break
        rot, t, ok = _backend.kernels.kabsch(src[mask], dst[mask], np.ones(int(mask.sum())))
        if not ok:
            break
        cand = RigidTransform(rot, t)
        cand_mask = residuals(src, dst, cand) < cfg.tau_a
        if cand_mask.sum() < mask.sum():
            break
        transform, mask = cand, cand_mask
        history.append(int(mask.sum()))
    history += [history[-1]] * (cfg.n_refine + 1 - len(history))
    return LGRResult(transform, np.nonzero(mask)[0], ids[best], history, len(ids))


def sample_triplets(n: int, count: int, seed) -> np.ndarray:
    """``count`` rows of three distinct indices below ``n``."""
    rng = np.random.default_rng(seed)
    out = rng.integers(0, n, size=(count, 3))
    while True:
        bad = (out[:, 0] == out[:, 1]) | (out[:, 0] == out[:, 2]) | (out[:, 1] == out[:, 2])
        if not bad.any():
            return out
        out[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))


def ransac_estimate(src, dst, cfg: EstimatorConfig = EstimatorConfig(), seed=0) -> RigidTransform:
    """3-point RANSAC; the winning hypothesis is refit on its inliers."""
    src, dst = _pts(src), _pts(dst)
    if len(src) < 3:
        raise EstimationError(f"need at least 3 pairs, got {len(src)}")
    samples = sample_triplets(len(src), cfg.ransac_iters, seed)
    row, _ = _backend.kernels.ransac(src, dst, samples, float(cfg.tau_a))
    if row < 0:
        raise EstimationError("every sampled triplet is degenerate", degenerate=True)
    a = samples[row]
    hypo = weighted_svd(src[a], dst[a])
    mask = residuals(src, dst, hypo) < cfg.tau_a
    try:
        return weighted_svd(src[mask], dst[mask])
    except EstimationError:
        return hypo


def svd_top_estimate(src, dst, scores, cfg: EstimatorConfig = EstimatorConfig()) -> RigidTransform:
    """Weighted SVD over the ``svd_top`` highest-scoring pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    top = np.argsort(-scores, kind="stable")[: cfg.svd_top]
    return weighted_svd(_pts(src)[top], _pts(dst)[top], scores[top])
