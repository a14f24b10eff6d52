"""Time every hot kernel under the compiled and the pure-Python backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Prints one row per kernel with the best-of-N wall time for each backend and
the speedup of the compiled one.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from geotr import _backend
from geotr.kdtree import KDTree
from geotr.registration import sample_triplets


def cases(rng):
    m = rng.normal(size=(3, 3))
    src = rng.normal(size=(2000, 3))
    dst = src @ np.linalg.qr(rng.normal(size=(3, 3)))[0].T + rng.normal(0, 0.01, src.shape)
    w = rng.uniform(0.1, 1, len(src))
    base, queries = rng.normal(size=(5000, 3)), rng.normal(size=(1000, 3))
    scores = rng.normal(size=(64, 64))
    rots = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(200)])
    ts = rng.normal(size=(200, 3))
    samples = sample_triplets(len(src), 2000, 0)
    return {
        "svd3": lambda k: k.svd3(m),
        "kabsch (2000 pairs)": lambda k: k.kabsch(src, dst, w),
        "kd-tree knn (1000 x k=16)": lambda k: KDTree(base).query(queries, 16),
        "kd-tree radius (1000 x r=0.3)": lambda k: KDTree(base).query_radius(queries, 0.3),
        "log sinkhorn (64x64, 100 it)": lambda k: k.sinkhorn_log(scores, 1.0, 100),
        "inlier counts (200 poses)": lambda k: k.count_inliers_many(src, dst, rots, ts, 0.1),
        "ransac (2000 triplets)": lambda k: k.ransac(src, dst, samples, 0.1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels are not built; only the Python backend is timed", file=sys.stderr)
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        for b in backends:
            previous = _backend.use(b)
            try:
                row[b] = min(timeit.repeat(lambda: fn(_backend.kernels), number=1, repeat=args.repeat))
            finally:
                _backend.use(previous)
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)

    print(f"{'kernel':32s} {'python [s]':>12s} {'cython [s]':>12s} {'speedup':>9s}")
    for r in rows:
        cy = f"{r['cython']:12.5f}" if "cython" in r else f"{'-':>12s}"
        sp = f"{r['speedup']:8.1f}x" if "speedup" in r else f"{'-':>9s}"
        print(f"{r['kernel']:32s} {r['python']:12.5f} {cy} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
