"""End-to-end registration of one pair, stage by stage."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matching, registration
from .cloud import (PointCloud, RigidTransform, group_points, voxel_downsample, write_transforms)
from .config import PipelineConfig
from .errors import EstimationError, GeoError, StageError
from .features import FeatureProvider
from .metrics import MetricsReport, Thresholds, compute_metrics
from .model import Model


def input_digest(*clouds) -> str:
    h = hashlib.sha256()
    for c in clouds:
        h.update(np.ascontiguousarray(getattr(c, "points", c), dtype=np.float64).tobytes())
    return h.hexdigest()[:12]


@dataclass
class PipelineResult:
    transform: RigidTransform | None
    corr: matching.CorrespondenceSet
    supermatches: matching.CorrespondenceSet
    metrics: MetricsReport
    timings: dict = field(default_factory=dict)
    graphs: tuple = ()
    pose_error: str | None = None


class _Stages:
    def __init__(self, digest):
        self.digest = digest
        self.timings = {}

    def run(self, name, fn, *args, **kw):
        start = time.perf_counter()
        try:
            return fn(*args, **kw)
        except StageError:
            raise
        except (GeoError, ValueError, ArithmeticError) as exc:
            raise StageError(name, self.digest, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - start


def build_level_graph(pc, cfg: PipelineConfig):
    dense = voxel_downsample(pc, cfg.dense_voxel)
    supers = voxel_downsample(dense, cfg.super_voxel)
    return dense, supers


def estimate(corr, graph_p, graph_q, cfg: PipelineConfig, seed=0):
    src = graph_p.dense_points[corr.pairs[:, 0]]
    dst = graph_q.dense_points[corr.pairs[:, 1]]
    ecfg = cfg.estimator_cfg()
    if cfg.estimator == "lgr":
        return registration.local_to_global(src, dst, corr.scores, corr.group_of, ecfg).transform
    if cfg.estimator == "ransac":
        return registration.ransac_estimate(src, dst, ecfg, seed)
    return registration.svd_top_estimate(src, dst, corr.scores, ecfg)


def run_pipeline(p, q, cfg: PipelineConfig = PipelineConfig(), model: Model | None = None,
                 t_gt: RigidTransform | None = None, clean=None, provider: FeatureProvider | None = None,
                 thresholds: Thresholds | None = None, keep_going: bool = False) -> PipelineResult:
    """Downsample, group, featurise, attend, match, estimate, measure.

    ``timings`` reports ``model`` (everything before pose estimation),
    ``pose`` and their sum ``total``, plus every stage separately.
    With ``keep_going`` an estimation failure leaves the pose empty and is
    recorded in ``pose_error`` instead of raising; benchmarks count such a
    pair as a failed registration.
    """
    p, q = PointCloud(getattr(p, "points", p)), PointCloud(getattr(q, "points", q))
    stages = _Stages(input_digest(p, q))
    model = model or Model(cfg.model(), seed=cfg.seed)
    if provider is None and cfg.feature_file:
        provider = FeatureProvider.from_file(cfg.feature_file)

    dp, sp = stages.run("downsample", build_level_graph, p, cfg)
    dq, sq = stages.run("downsample_q", build_level_graph, q, cfg)
    gp = stages.run("group", group_points, dp, sp)
    gq = stages.run("group_q", group_points, dq, sq)
    for g in (gp, gq):
        g.meta.update(dense_voxel=cfg.dense_voxel, super_voxel=cfg.super_voxel)
    hp, hq = stages.run("model", model.forward, gp, gq, provider)
    sm = stages.run("superpoint_match", matching.superpoint_match, hp, hq, cfg.n_c, cfg.match_mode, cfg.match_thresh)
    corr = stages.run(
        "point_match", matching.point_match, gp, gq, sm, cfg.k_mutual, cfg.sinkhorn_iters, model.dustbin
    )
    t_est, pose_error = None, None
    if len(corr) >= 3:
        try:
            t_est = stages.run("pose", estimate, corr, gp, gq, cfg, cfg.seed)
        except StageError as exc:
            if not (keep_going and isinstance(exc.cause, EstimationError)):
                raise
            pose_error = str(exc)
    else:
        stages.timings["pose"] = 0.0
        pose_error = f"only {len(corr)} point correspondences"
    th = thresholds or Thresholds(inlier=0.1, overlap_tau=cfg.dense_voxel)
    metrics = stages.run("metrics", compute_metrics, corr, sm, t_est, t_gt, gp, gq, th, clean, p.points, q.points)

    t = stages.timings
    model_time = sum(t[k] for k in ("downsample", "downsample_q", "group", "group_q", "model",
                                    "superpoint_match", "point_match"))
    timings = {"model": model_time, "pose": t["pose"], "total": model_time + t["pose"], "stages": dict(t)}
    return PipelineResult(t_est, corr, sm, metrics, timings, (gp, gq), pose_error)


def write_outputs(result: PipelineResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(result.timings, indent=2, sort_keys=True) + "\n")
    matching.write_csv(out / "corr.csv", result.supermatches, result.corr)
    if result.transform is not None:
        write_transforms(out / "pose.txt", [result.transform])
    else:
        (out / "pose.txt").write_text("")
