"""Exact k-d tree for 3-D nearest-neighbour and radius queries.

Build is numpy; queries run in the selected kernel backend. Results are
sorted by distance with ties broken toward the lower point index, so they
match an exhaustive scan exactly.
"""

from __future__ import annotations

import numpy as np

from . import _backend
from .errors import ParameterError

BRUTE_FORCE_BELOW = 64


class KDTree:
    def __init__(self, points, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ParameterError(f"expected (N, 3) points, got {self.points.shape}")
        self.leaf_size = max(1, int(leaf_size))
        self._build()

    def __len__(self):
        return len(self.points)

    def _build(self):
        n = len(self.points)
        perm = np.arange(n, dtype=np.int64)
        start, end, left, right, lo, hi = [], [], [], [], [], []

        def new_node(s, e):
            idx = perm[s:e]
            sub = self.points[idx]
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            if len(idx):
                lo.append(sub.min(axis=0))
                hi.append(sub.max(axis=0))
            else:
                lo.append(np.full(3, np.inf))
                hi.append(np.full(3, -np.inf))
            return len(start) - 1

        root = new_node(0, n)
        todo = [root]
        while todo:
            node = todo.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            dim = int(np.argmax(hi[node] - lo[node]))
            if hi[node][dim] == lo[node][dim]:
                continue  # all points coincide
            idx = perm[s:e]
            mid = (e - s) // 2
            order = np.argsort(self.points[idx, dim], kind="stable")
            perm[s:e] = idx[order]
            a = new_node(s, s + mid)
            b = new_node(s + mid, e)
            left[node], right[node] = a, b
            todo.extend((a, b))

        self.perm = perm
        self.start = np.array(start, dtype=np.int64)
        self.end = np.array(end, dtype=np.int64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.lo = np.ascontiguousarray(lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.ascontiguousarray(hi, dtype=np.float64).reshape(-1, 3)

    def _arrays(self):
        return (self.points, self.perm, self.start, self.end, self.left, self.right, self.lo, self.hi)

    def query(self, queries, k: int = 1):
        """Indices and distances of the ``k`` nearest points, shape ``(Q, k)``."""
        queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        if not 1 <= k <= len(self.points):
            raise ParameterError(f"k={k} outside [1, {len(self.points)}]")
        return _backend.kernels.kd_knn(*self._arrays(), queries, int(k))

    def query_radius(self, queries, radius: float):
        """Points strictly closer than ``radius``: ``(offsets, indices, distances)``."""
        queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        if not radius > 0:
            raise ParameterError(f"radius must be positive, got {radius}")
        return _backend.kernels.kd_radius(*self._arrays(), queries, float(radius))


def _sq_dists(queries, base):
    dx = queries[:, None, 0] - base[None, :, 0]
    dy = queries[:, None, 1] - base[None, :, 1]
    dz = queries[:, None, 2] - base[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def brute_knn(queries, base, k):
    """Exhaustive kNN with the same ordering rule as the tree."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    base = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    if not 1 <= k <= len(base):
        raise ParameterError(f"k={k} outside [1, {len(base)}]")
    d2 = _sq_dists(queries, base)
    # stable argsort keeps equal distances in ascending index order
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx.astype(np.int64), np.sqrt(np.take_along_axis(d2, idx, axis=1))


def brute_radius(queries, base, radius):
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    base = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    d2 = _sq_dists(queries, base)
    r2 = radius * radius
    offsets = [0]
    idx_all, dist_all = [], []
    for row in d2:
        hit = np.nonzero(row < r2)[0]
        hit = hit[np.argsort(row[hit], kind="stable")]
        idx_all.append(hit)
        dist_all.append(np.sqrt(row[hit]))
        offsets.append(offsets[-1] + len(hit))
    return (
        np.array(offsets, dtype=np.int64),
        np.concatenate(idx_all).astype(np.int64) if idx_all else np.zeros(0, np.int64),
        np.concatenate(dist_all) if dist_all else np.zeros(0),
    )
