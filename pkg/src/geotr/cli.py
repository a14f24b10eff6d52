"""Command-line entry points: ``geotr {synth,register,bench,train,eval-weights}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .cloud import read_points, read_transforms
from .config import dump_config, load_config, parse_pairs
from .errors import GeoError
from .experiments import train_model
from .model import Model
from .pipeline import run_pipeline, write_outputs
from .synth import make_pairs

log = logging.getLogger("geotr")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--estimator", choices=("lgr", "ransac", "svd"))
    parser.add_argument("--mode", dest="match_mode", choices=("topk", "threshold"))
    parser.add_argument("--nc", dest="n_c", type=int, help="number of superpoint matches")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geotr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic pairs to pair directories")
    _common(p)

    p = sub.add_parser("register", help="register one pair")
    _common(p)
    p.add_argument("--pair", help="pair directory written by 'synth'")
    p.add_argument("--source", help="source cloud (.xyz or .ply)")
    p.add_argument("--target", help="target cloud (.xyz or .ply)")
    p.add_argument("--gt", help="ground-truth transform file for metrics")
    p.add_argument("--weights")

    p = sub.add_parser("bench", help="evaluate a set of pairs")
    _common(p)
    p.add_argument("--data", help="directory of pair directories (default: synthetic)")
    p.add_argument("--weights")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a toy model on synthetic pairs")
    _common(p)

    p = sub.add_parser("eval-weights", help="load a weights file and benchmark it")
    _common(p)
    p.add_argument("weights")
    p.add_argument("--data")
    p.add_argument("--workers", type=int, default=1)
    return parser


def resolve_config(args):
    overrides = parse_pairs(args.set)
    for key in ("seed", "estimator", "match_mode", "n_c"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "weights", None):
        overrides["weights"] = args.weights
    return load_config(args.config, overrides)


def _model(cfg):
    return Model.load(cfg.weights) if cfg.weights else Model(cfg.model(), seed=cfg.seed)


def cmd_synth(args, cfg) -> dict:
    pairs = make_pairs(cfg.pairs, cfg.synth(), cfg.shape)
    for i, pair in enumerate(pairs):
        bench.write_pair(Path(args.out_dir) / f"pair_{i:03d}", pair)
    return {"pairs": len(pairs), "out_dir": args.out_dir}


def cmd_register(args, cfg) -> dict:
    if args.pair:
        pair = bench.read_pair(args.pair)
        p, q, t_gt, clean = pair.p, pair.q, pair.t_gt, pair.clean
    elif args.source and args.target:
        p, q, clean = read_points(args.source), read_points(args.target), None
        t_gt = read_transforms(args.gt)[0] if args.gt else None
    else:
        raise GeoError("register needs --pair or both --source and --target")
    res = run_pipeline(p, q, cfg, _model(cfg), t_gt, clean)
    write_outputs(res, args.out_dir)
    return res.metrics.to_dict()


def _pairs(args, cfg):
    return bench.read_pair_set(args.data) if args.data else bench.synthetic_set(cfg)


def cmd_bench(args, cfg) -> dict:
    report = bench.run_bench(_pairs(args, cfg), cfg, _model(cfg), args.out_dir, args.workers)
    return report["summary"]


def cmd_train(args, cfg) -> dict:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = make_pairs(cfg.pairs, cfg.synth(), cfg.shape)

    def progress(step, result):
        if step % 10 == 0:
            log.info("step %d loss %.4f", step, result.total)

    model, history = train_model(pairs, cfg, out / "train_log.jsonl", progress)
    model.save(out / "weights.bin")
    (out / "config.txt").write_text(dump_config(cfg))
    return {"steps": len(history), "final_loss": history[-1].total, "weights": str(out / "weights.bin")}


def cmd_eval_weights(args, cfg) -> dict:
    model = Model.load(args.weights)
    report = bench.run_bench(_pairs(args, cfg), cfg, model, args.out_dir, args.workers)
    return report["summary"]


COMMANDS = {
    "synth": cmd_synth,
    "register": cmd_register,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval-weights": cmd_eval_weights,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](args, cfg)
    except (GeoError, OSError) as exc:
        print(f"geotr {args.command}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
