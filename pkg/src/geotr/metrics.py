"""Registration metrics.

Residuals are computed with explicit per-coordinate arithmetic and means
with ``math.fsum`` so every value is reproducible bit for bit by a plain
loop over the same inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import RigidTransform
from .training import directional_overlap, make_gt_point_matches


@dataclass(frozen=True)
class Thresholds:
    inlier: float = 0.1
    fmr: float = 0.05
    rmse: float = 0.2
    rre: float = 5.0
    rte: float = 2.0
    protocol: str = "rmse"  # or "rre_rte"
    overlap_tau: float | None = None


@dataclass
class MetricsReport:
    ir: float | None = None
    fmr: float | None = None
    rr: float | None = None
    pir: float | None = None
    rre: float | None = None
    rte: float | None = None
    rmse: float | None = None
    chamfer: float | None = None
    num_corr: int = 0
    num_super: int = 0
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def transform_points(t: RigidTransform, pts) -> np.ndarray:
    r, tr = t.rotation, t.translation
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    x = r[0, 0] * p[:, 0] + r[0, 1] * p[:, 1] + r[0, 2] * p[:, 2] + tr[0]
    y = r[1, 0] * p[:, 0] + r[1, 1] * p[:, 1] + r[1, 2] * p[:, 2] + tr[1]
    z = r[2, 0] * p[:, 0] + r[2, 1] * p[:, 1] + r[2, 2] * p[:, 2] + tr[2]
    return np.stack([x, y, z], axis=1)


def _norms(d) -> np.ndarray:
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def _mean(values) -> float:
    values = list(np.asarray(values, dtype=np.float64).reshape(-1))
    return math.fsum(values) / len(values)


def correspondence_residuals(src, dst, t: RigidTransform) -> np.ndarray:
    return _norms(transform_points(t, src) - np.asarray(dst, dtype=np.float64).reshape(-1, 3))


def inlier_ratio(src, dst, t_gt: RigidTransform, thresh: float = 0.1) -> float:
    res = correspondence_residuals(src, dst, t_gt)
    if len(res) == 0:
        return 0.0
    return int((res < thresh).sum()) / len(res)


def rotation_error_deg(r_gt, r_est) -> float:
    """Geodesic angle; the trace is accumulated in row-major order."""
    tr = 0.0
    for k in range(3):
        for i in range(3):
            tr += float(r_gt[k, i]) * float(r_est[k, i])
    cos = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    return math.degrees(math.acos(cos))


def translation_error(t_gt, t_est) -> float:
    d = [float(t_est[i]) - float(t_gt[i]) for i in range(3)]
    return math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])


def registration_rmse(points, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    d = transform_points(t_est, points) - transform_points(t_gt, points)
    return math.sqrt(_mean(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]))


def _min_sq_dists(a, b) -> np.ndarray:
    out = np.empty(len(a))
    for i in range(len(a)):
        d = b - a[i]
        out[i] = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]).min()
    return out


def modified_chamfer(p, q, t_est: RigidTransform, t_gt: RigidTransform, clean) -> float:
    """Chamfer distance where each side is compared to the other's clean, complete copy.

    ``clean`` is the complete shape in Q's frame; its copy in the estimated
    source frame is ``t_est . t_gt^-1 (clean)``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    src = transform_points(t_est, p)
    src_clean = transform_points(t_est.compose(t_gt.inverse()), clean)
    q = np.asarray(q, dtype=np.float64)
    return _mean(_min_sq_dists(src, clean)) + _mean(_min_sq_dists(q, src_clean))


def patch_inlier_ratio(supermatches, graph_p, graph_q, t_gt: RigidTransform, tau: float) -> float:
    if len(supermatches) == 0:
        return 0.0
    o = directional_overlap(graph_p, graph_q, t_gt, tau)
    hit = o[supermatches.pairs[:, 0], supermatches.pairs[:, 1]] > 0
    return int(hit.sum()) / len(hit)


def compute_metrics(corr, supermatches, t_est: RigidTransform | None, t_gt: RigidTransform | None,
                    graph_p, graph_q, thresholds: Thresholds = Thresholds(), clean=None,
                    p_raw=None, q_raw=None) -> MetricsReport:
    """Every metric computable from the inputs; the rest stay ``None``."""
    rep = MetricsReport(num_corr=len(corr), num_super=len(supermatches), thresholds=asdict(thresholds))
    if t_gt is None:
        return rep
    src = graph_p.dense_points[corr.pairs[:, 0]]
    dst = graph_q.dense_points[corr.pairs[:, 1]]
    rep.ir = inlier_ratio(src, dst, t_gt, thresholds.inlier)
    rep.fmr = float(rep.ir >= thresholds.fmr)
    tau = thresholds.overlap_tau or graph_p.meta.get("dense_voxel", thresholds.inlier)
    rep.pir = patch_inlier_ratio(supermatches, graph_p, graph_q, t_gt, tau)
    if t_est is None:
        return rep
    rep.rre = rotation_error_deg(t_gt.rotation, t_est.rotation)
    rep.rte = translation_error(t_gt.translation, t_est.translation)
    gt = make_gt_point_matches(graph_p.dense_points, graph_q.dense_points, t_gt, tau)
    if len(gt.matches):
        rep.rmse = registration_rmse(graph_p.dense_points[gt.matches[:, 0]], t_est, t_gt)
    if thresholds.protocol == "rre_rte":
        rep.rr = float(rep.rre < thresholds.rre and rep.rte < thresholds.rte)
    elif rep.rmse is not None:
        rep.rr = float(rep.rmse < thresholds.rmse)
    if clean is not None and p_raw is not None and q_raw is not None:
        rep.chamfer = modified_chamfer(p_raw, q_raw, t_est, t_gt, clean)
    return rep
