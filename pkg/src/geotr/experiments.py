"""Desk-scale experiments: overfitting, generalisation, estimator and
refinement comparisons, and attention cost scaling."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import registration as rg
from .attention import geometric_score_term, shared_projection
from .cloud import RigidTransform, build_graph
from .config import PipelineConfig
from .model import Model
from .pipeline import run_pipeline
from .synth import SynthPair, make_pairs
from .training import TrainPair, train

# Settings shared by the training experiments.
EXPERIMENT_CONFIG = PipelineConfig(
    d_t=64, n_layers=2, features="encoder", n_c=32, lr=2e-3, steps=500, train_sinkhorn_iters=30,
)


def training_pair(pair: SynthPair, cfg: PipelineConfig) -> TrainPair:
    gp = build_graph(pair.p, cfg.dense_voxel, cfg.super_voxel)
    gq = build_graph(pair.q, cfg.dense_voxel, cfg.super_voxel)
    return TrainPair(gp, gq, pair.t_gt, cfg.dense_voxel)


def train_model(pairs: list[SynthPair], cfg: PipelineConfig, log_path=None, callback=None):
    model = Model(cfg.model(), seed=cfg.seed)
    tpairs = [training_pair(p, cfg) for p in pairs]
    history = train(model, tpairs, cfg.train(), cfg.loss(), log_path, callback)
    return model, history


def evaluate(model: Model, pairs: list[SynthPair], cfg: PipelineConfig) -> list:
    """Pipeline metrics for every pair; a pair without a pose gets RRE = 180, RTE = inf."""
    reports = []
    for pair in pairs:
        res = run_pipeline(pair.p, pair.q, cfg, model, pair.t_gt, pair.clean, keep_going=True)
        rep = res.metrics
        if rep.rre is None:
            rep.rre, rep.rte, rep.rr = 180.0, math.inf, 0.0
        reports.append(rep)
    return reports


def summarise(reports) -> dict:
    def col(name):
        return np.array([getattr(r, name) for r in reports], dtype=np.float64)

    return {
        "pairs": len(reports),
        "ir_mean": float(col("ir").mean()),
        "pir_mean": float(col("pir").mean()),
        "fmr": float(col("fmr").mean()),
        "rr": float(col("rr").mean()),
        "rre_median": float(np.median(col("rre"))),
        "rte_median": float(np.median(col("rte"))),
    }


# ---------------------------------------------------------------------------
# training experiments
# ---------------------------------------------------------------------------


def overfit(cfg: PipelineConfig = EXPERIMENT_CONFIG, seed: int = 7) -> dict:
    pair = make_pairs(1, cfg.synth(seed), cfg.shape)[0]
    start = time.perf_counter()
    model, history = train_model([pair], cfg)
    train_time = time.perf_counter() - start
    out = summarise(evaluate(model, [pair], cfg))
    out.update(train_seconds=train_time, final_loss=history[-1].total)
    return out


def generalization(cfg: PipelineConfig = EXPERIMENT_CONFIG, n_train: int = 50, n_test: int = 20,
                   steps: int = 1500, geometric: bool = True) -> dict:
    """Train on ``n_train`` pairs, report on ``n_test`` pairs from disjoint seeds."""
    cfg = replace(cfg, steps=steps, geometric=geometric)
    train_pairs = make_pairs(n_train, cfg.synth(1000), cfg.shape)
    test_pairs = make_pairs(n_test, cfg.synth(5000), cfg.shape)
    start = time.perf_counter()
    model, history = train_model(train_pairs, cfg)
    out = summarise(evaluate(model, test_pairs, cfg))
    out.update(train_seconds=time.perf_counter() - start, final_loss=history[-1].total)
    return out


# ---------------------------------------------------------------------------
# estimator experiments on planted correspondence sets
# ---------------------------------------------------------------------------


@dataclass
class PlantedSet:
    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray
    group_of: np.ndarray
    t_gt: RigidTransform
    inlier: np.ndarray = field(repr=False, default=None)


def planted_correspondences(seed: int, n_groups: int = 250, group_size: int = 20, inlier_fraction: float = 0.4,
                            noise: float = 0.01, outlier_groups_consistent: bool = False) -> PlantedSet:
    """Grouped correspondences where a fraction of groups follow ``t_gt``.

    Inlier groups hold local patches of a unit-sphere cloud mapped by
    ``t_gt`` plus Gaussian noise; outlier groups map their patch to a random
    location of the target (locally coherent but globally wrong).
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    t_gt = RigidTransform.from_axis_angle(axis, rng.uniform(0, math.pi), rng.uniform(-0.5, 0.5, 3))
    centres = rng.normal(size=(n_groups, 3))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    n_in = int(round(inlier_fraction * n_groups))
    good = np.zeros(n_groups, dtype=bool)
    good[rng.choice(n_groups, n_in, replace=False)] = True
    src, dst, group = [], [], []
    for g in range(n_groups):
        patch = centres[g] + rng.normal(0, 0.08, (group_size, 3))
        if good[g]:
            target = t_gt.apply(patch)
        else:
            wrong = RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, math.pi), rng.uniform(-1, 1, 3))
            target = wrong.apply(patch) if outlier_groups_consistent else rng.uniform(-1.5, 1.5, (group_size, 3))
        src.append(patch)
        dst.append(target + rng.normal(0, noise, (group_size, 3)))
        group.append(np.full(group_size, g))
    group = np.concatenate(group)
    return PlantedSet(
        np.concatenate(src), np.concatenate(dst), rng.uniform(0.2, 1.0, len(group)), group, t_gt, good[group]
    )


def pose_ok(t_est: RigidTransform, t_gt: RigidTransform, rre: float = 5.0, rte: float = 0.1) -> bool:
    from .metrics import rotation_error_deg, translation_error

    return rotation_error_deg(t_gt.rotation, t_est.rotation) < rre and translation_error(
        t_gt.translation, t_est.translation
    ) < rte


def estimator_comparison(n_sets: int = 20, ransac_iters: int = 50000, seed: int = 0) -> dict:
    """Registration recall and pose time of LGR vs RANSAC on planted sets."""
    cfg = rg.EstimatorConfig(ransac_iters=ransac_iters)
    lgr_ok = ransac_ok = 0
    lgr_time = ransac_time = 0.0
    for i in range(n_sets):
        s = planted_correspondences(seed + i)
        t0 = time.perf_counter()
        t_lgr = rg.local_to_global(s.src, s.dst, s.scores, s.group_of, cfg).transform
        t1 = time.perf_counter()
        t_ransac = rg.ransac_estimate(s.src, s.dst, cfg, seed + i)
        t2 = time.perf_counter()
        lgr_time += t1 - t0
        ransac_time += t2 - t1
        lgr_ok += pose_ok(t_lgr, s.t_gt)
        ransac_ok += pose_ok(t_ransac, s.t_gt)
    return {
        "sets": n_sets,
        "lgr_recall": lgr_ok / n_sets,
        "ransac_recall": ransac_ok / n_sets,
        "lgr_seconds": lgr_time,
        "ransac_seconds": ransac_time,
        "speedup": ransac_time / lgr_time,
    }


def refinement_curve(n_sets: int = 20, max_rounds: int = 10, seed: int = 100) -> np.ndarray:
    """Inlier count after ``N_r = 0..max_rounds`` refinement rounds, one row per set.

    Sets have noisier inliers (sigma 0.03) so that refinement has work to do.
    """
    rows = []
    for i in range(n_sets):
        s = planted_correspondences(seed + i, noise=0.03, outlier_groups_consistent=True)
        counts = []
        for n_r in range(max_rounds + 1):
            res = rg.local_to_global(s.src, s.dst, s.scores, s.group_of, rg.EstimatorConfig(n_refine=n_r))
            counts.append(len(res.inliers))
        rows.append(counts)
    return np.array(rows)


# ---------------------------------------------------------------------------
# attention cost scaling
# ---------------------------------------------------------------------------


def attention_cost(sizes=(64, 128, 256, 512), d_t: int = 128, heads: int = 4, repeats: int = 3, seed: int = 0) -> dict:
    """Best-of wall time of one layer's geometric score term per mode.

    Standard mode projects the M×M×d_t embedding by that layer's W^R inside
    the layer; shared mode reads an embedding projected once per forward
    pass. Returns the times and the fitted log-log growth exponents.
    """
    rng = np.random.default_rng(seed)
    w_r = rng.normal(0, 1 / math.sqrt(d_t), (d_t, d_t))
    times = {"standard": [], "shared": []}
    for m in sizes:
        q = rng.normal(size=(m, d_t))
        r = rng.normal(size=(m, m, d_t))
        projected = shared_projection(r, w_r).value
        for mode, emb in (("standard", r), ("shared", projected)):
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                geometric_score_term(q, emb, w_r, mode, heads)
                best = min(best, time.perf_counter() - t0)
            times[mode].append(best)
    logm = np.log(np.asarray(sizes, dtype=np.float64))
    slopes = {mode: float(np.polyfit(logm, np.log(t), 1)[0]) for mode, t in times.items()}
    return {"sizes": list(sizes), "times": times, "exponents": slopes,
            "difference": slopes["standard"] - slopes["shared"]}
