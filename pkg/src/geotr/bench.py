"""Benchmark sets: pair directories on disk and set-level evaluation."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .cloud import read_points, read_transforms, write_transforms, write_xyz
from .config import PipelineConfig
from .errors import DataError
from .model import Model
from .pipeline import run_pipeline, write_outputs
from .synth import SynthPair, make_pairs

PAIR_FILES = ("p.xyz", "q.xyz", "gt.txt")


def write_pair(directory, pair: SynthPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_xyz(d / "p.xyz", pair.p)
    write_xyz(d / "q.xyz", pair.q)
    write_xyz(d / "clean.xyz", pair.clean)
    write_transforms(d / "gt.txt", [pair.t_gt])


def read_pair(directory) -> SynthPair:
    d = Path(directory)
    missing = [f for f in PAIR_FILES if not (d / f).exists()]
    if missing:
        raise DataError(f"{d}: missing {', '.join(missing)}")
    clean = read_points(d / "clean.xyz").points if (d / "clean.xyz").exists() else None
    return SynthPair(read_points(d / "p.xyz"), read_points(d / "q.xyz"), read_transforms(d / "gt.txt")[0], clean)


def read_pair_set(directory) -> list[SynthPair]:
    dirs = sorted(p for p in Path(directory).iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"{directory}: no pair directories")
    return [read_pair(d) for d in dirs]


def synthetic_set(cfg: PipelineConfig) -> list[SynthPair]:
    return make_pairs(cfg.pairs, cfg.synth(), cfg.shape)


def _evaluate_one(args):
    index, pair, cfg, model, out_dir = args
    res = run_pipeline(pair.p, pair.q, cfg, model, pair.t_gt, pair.clean, keep_going=True)
    if out_dir is not None:
        write_outputs(res, Path(out_dir) / f"pair_{index:03d}")
    return index, res.metrics.to_dict(), res.timings


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def run_bench(pairs, cfg: PipelineConfig, model: Model, out_dir=None, workers: int = 1) -> dict:
    """Evaluate every pair, then reduce in pair order.

    Pairs run in a process pool when ``workers > 1``; each pair is
    deterministic so the summary does not depend on scheduling.
    """
    jobs = [(i, pair, cfg, model, out_dir) for i, pair in enumerate(pairs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    per_pair = [r[1] for r in results]
    timings = [r[2] for r in results]

    def col(key):
        return [m[key] for m in per_pair]

    summary = {
        "pairs": len(per_pair),
        "ir": _mean(col("ir")),
        "fmr": _mean(col("fmr")),
        "rr": _mean([m["rr"] if m["rr"] is not None else 0.0 for m in per_pair]),
        "pir": _mean(col("pir")),
        "rre_median": _median(col("rre")),
        "rte_median": _median(col("rte")),
        "chamfer": _mean(col("chamfer")),
        "model_time": math.fsum(t["model"] for t in timings),
        "pose_time": math.fsum(t["pose"] for t in timings),
    }
    summary["total_time"] = summary["model_time"] + summary["pose_time"]
    summary["digest"] = hashlib.sha256(json.dumps(per_pair, sort_keys=True).encode()).hexdigest()[:16]
    report = {"summary": summary, "per_pair": per_pair}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report
