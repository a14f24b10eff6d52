"""Superpoint correspondences and optimal-transport point matching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from . import autodiff as ad
from .errors import ContractError, NormalizationError, ParameterError

# log-mass given to padding rows/columns in batched Sinkhorn
PAD_LOG = -1e9
THRESHOLD_TOPUP = 128


@dataclass
class CorrespondenceSet:
    level: str
    pairs: np.ndarray
    scores: np.ndarray
    group_of: np.ndarray | None = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.pairs):
            raise ContractError("pairs and scores differ in length")
        if self.group_of is not None:
            self.group_of = np.asarray(self.group_of, dtype=np.int64).reshape(-1)
        if len(np.unique(self.pairs, axis=0)) != len(self.pairs):
            raise ContractError("duplicate pairs in correspondence set")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def empty(cls, level):
        return cls(level, np.zeros((0, 2), np.int64), np.zeros(0), np.zeros(0, np.int64))

    def groups(self) -> dict[int, np.ndarray]:
        """Row indices of this set per group id, in ascending id order."""
        if self.group_of is None:
            return {0: np.arange(len(self))}
        ids = np.unique(self.group_of)
        return {int(g): np.nonzero(self.group_of == g)[0] for g in ids}


def write_csv(path, *sets: CorrespondenceSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "ip", "iq", "score", "group"])
        for cs in sets:
            for r, (ip, iq) in enumerate(cs.pairs.tolist()):
                group = "" if cs.group_of is None else int(cs.group_of[r])
                w.writerow([cs.level, ip, iq, repr(float(cs.scores[r])), group])


def read_csv(path) -> dict[str, CorrespondenceSet]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["level"], []).append(rec)
    out = {}
    for level, recs in rows.items():
        groups = [r["group"] for r in recs]
        out[level] = CorrespondenceSet(
            level,
            [[int(r["ip"]), int(r["iq"])] for r in recs],
            [float(r["score"]) for r in recs],
            None if all(g == "" for g in groups) else [int(g) for g in groups],
        )
    return out


# ---------------------------------------------------------------------------
# superpoint matching
# ---------------------------------------------------------------------------


def _values(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def normalize_rows(x, cloud: str = "") -> np.ndarray:
    x = _values(x)
    norms = np.linalg.norm(x, axis=1)
    bad = np.nonzero(~(norms > 0))[0]
    if len(bad):
        raise NormalizationError(f"feature row {int(bad[0])} of {cloud or 'input'} has zero norm")
    return x / norms[:, None]


def dual_normalize(s: np.ndarray) -> np.ndarray:
    """``s_ij / rowsum_i * s_ij / colsum_j``."""
    return (s / s.sum(axis=1, keepdims=True)) * (s / s.sum(axis=0, keepdims=True))


def gaussian_correlation(hp, hq) -> np.ndarray:
    a = normalize_rows(hp, "P")
    b = normalize_rows(hq, "Q")
    d2 = np.clip(2.0 - 2.0 * (a @ b.T), 0.0, None)
    return np.exp(-d2)


def _topk_flat(values: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest entries; ties go to the lower index."""
    flat = values.reshape(-1)
    k = min(k, flat.size)
    return np.argsort(-flat, kind="stable")[:k]


def superpoint_match(hp, hq, n_c: int = 256, mode: str = "topk", thresh: float = 0.75) -> CorrespondenceSet:
    """Superpoint correspondences from hybrid features.

    ``topk`` keeps the ``n_c`` largest dual-normalised scores. ``threshold``
    keeps pairs whose unit-feature distance is below ``thresh`` and tops them
    up with the best 128 when fewer than 128 qualify.
    """
    s = gaussian_correlation(hp, hq)
    sbar = dual_normalize(s)
    m = s.shape[1]
    if mode == "topk":
        chosen = _topk_flat(sbar, n_c)
    elif mode == "threshold":
        dist = np.sqrt(np.clip(-np.log(s), 0.0, None))
        chosen = np.nonzero(dist.reshape(-1) < thresh)[0]
        if len(chosen) < THRESHOLD_TOPUP:
            chosen = np.union1d(chosen, _topk_flat(sbar, THRESHOLD_TOPUP))
        chosen = chosen[np.argsort(-sbar.reshape(-1)[chosen], kind="stable")]
    else:
        raise ParameterError(f"unknown superpoint matching mode {mode!r}")
    pairs = np.stack([chosen // m, chosen % m], axis=1)
    return CorrespondenceSet("superpoint", pairs, sbar.reshape(-1)[chosen])


# ---------------------------------------------------------------------------
# optimal transport
# ---------------------------------------------------------------------------


@dataclass
class AssignmentMatrix:
    """Dustbin-augmented assignment, stored in log domain.

    ``log_augmented`` has shape ``(n+1, m+1)`` (or ``(B, n+1, m+1)`` for a
    padded batch); ``z`` drops the dustbin row and column.
    """

    log_augmented: ad.Tensor

    @classmethod
    def from_probabilities(cls, probs):
        return cls(ad.Tensor(np.log(np.asarray(probs, dtype=np.float64))))

    @property
    def augmented(self) -> np.ndarray:
        return np.exp(self.log_augmented.value)

    @property
    def z(self) -> np.ndarray:
        return self.augmented[..., :-1, :-1]


def sinkhorn_batched(scores, alpha, iters: int, n_valid=None, m_valid=None) -> ad.Tensor:
    """Tape-recorded log-domain Sinkhorn over a padded batch.

    ``scores`` is ``(B, n, m)``; item ``b`` uses its first ``n_valid[b]`` rows
    and ``m_valid[b]`` columns. Returns ``(B, n+1, m+1)`` log-assignments with
    the dustbin in the last row/column. Each of the ``iters`` row/column
    updates is unrolled onto the tape.
    """
    if iters < 1:
        raise ParameterError("sinkhorn needs at least one iteration")
    scores = ad.as_tensor(scores)
    alpha = ad.as_tensor(alpha)
    b, n, m = scores.shape
    n_valid = np.full(b, n) if n_valid is None else np.asarray(n_valid)
    m_valid = np.full(b, m) if m_valid is None else np.asarray(m_valid)

    ones_col = np.ones((b, n, 1))
    ones_row = np.ones((b, 1, m + 1))
    top = ad.concat([scores, ad.mul(ones_col, alpha)], axis=2)
    z = ad.concat([top, ad.mul(ones_row, alpha)], axis=1)

    rows = np.arange(n + 1)[None, :]
    cols = np.arange(m + 1)[None, :]
    row_ok = (rows < n_valid[:, None]) | (rows == n)
    col_ok = (cols < m_valid[:, None]) | (cols == m)
    mask = row_ok[:, :, None] & col_ok[:, None, :]
    z = ad.where(mask, z, PAD_LOG)

    norm = -np.log(n_valid + m_valid)
    log_mu = np.where(rows < n_valid[:, None], norm[:, None], PAD_LOG)
    log_mu[:, n] = np.log(m_valid) + norm
    log_nu = np.where(cols < m_valid[:, None], norm[:, None], PAD_LOG)
    log_nu[:, m] = np.log(n_valid) + norm

    v = ad.Tensor(np.zeros((b, 1, m + 1)))
    u = None
    for _ in range(iters):
        u = ad.sub(log_mu[:, :, None], ad.logsumexp(ad.add(z, v), axis=2, keepdims=True))
        v = ad.sub(log_nu[:, None, :], ad.logsumexp(ad.add(z, u), axis=1, keepdims=True))
    return ad.sub(ad.add(ad.add(z, u), v), norm[:, None, None])


def sinkhorn(cost, dustbin, iters: int = 100) -> AssignmentMatrix:
    """Optimal-transport assignment for one score matrix.

    Runs on the tape when a gradient is needed, otherwise in the kernel
    backend. Row marginals are ``(1, ..., 1, m)``, column ``(1, ..., 1, n)``.
    """
    if iters < 1:
        raise ParameterError("sinkhorn needs at least one iteration")
    cost_t = ad.as_tensor(cost)
    alpha_t = ad.as_tensor(dustbin)
    if cost_t.ndim != 2:
        raise ParameterError(f"sinkhorn expects a matrix, got shape {cost_t.shape}")
    if ad.active_tape() is not None and (cost_t.requires_grad or alpha_t.requires_grad):
        n, m = cost_t.shape
        batched = sinkhorn_batched(ad.reshape(cost_t, (1, n, m)), alpha_t, iters)
        return AssignmentMatrix(ad.reshape(batched, (n + 1, m + 1)))
    log_z = _backend.kernels.sinkhorn_log(
        np.ascontiguousarray(cost_t.value), float(alpha_t.value.reshape(-1)[0]), int(iters)
    )
    return AssignmentMatrix(ad.Tensor(log_z))


def sinkhorn_probability_domain(cost, dustbin: float, iters: int) -> np.ndarray:
    """Plain scaling iterations on ``exp(scores)``; an independent check."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    k = np.full((n + 1, m + 1), math.exp(dustbin))
    k[:n, :m] = np.exp(cost)
    a = np.ones(n + 1)
    a[n] = m
    b = np.ones(m + 1)
    b[m] = n
    v = np.ones(m + 1)
    u = np.ones(n + 1)
    for _ in range(iters):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


def mutual_topk(z_aug: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask over the truncated matrix.

    A pair survives when it is among the ``k`` largest of its row and of its
    column (ties to the lower index) and exceeds both its row's and its
    column's dustbin entry.
    """
    z = z_aug[:-1, :-1]
    n, m = z.shape
    kr = min(k, m)
    kc = min(k, n)
    row_rank = np.argsort(-z, axis=1, kind="stable")[:, :kr]
    col_rank = np.argsort(-z, axis=0, kind="stable")[:kc, :]
    in_row = np.zeros_like(z, dtype=bool)
    in_col = np.zeros_like(z, dtype=bool)
    np.put_along_axis(in_row, row_rank, True, axis=1)
    np.put_along_axis(in_col, col_rank, True, axis=0)
    beats_bins = (z > z_aug[:-1, -1:]) & (z > z_aug[-1:, :-1])
    return in_row & in_col & beats_bins


def patch_scores(fp, fq) -> np.ndarray:
    """``F_P F_Q^T / sqrt(d)`` for two patches' dense features."""
    return fp @ fq.T / math.sqrt(fp.shape[1])


def point_match(graph_p, graph_q, supermatches: CorrespondenceSet, k_mutual: int = 3,
                iters: int = 100, dustbin: float = 1.0) -> CorrespondenceSet:
    """Dense correspondences propagated from superpoint matches.

    Each superpoint match is solved independently; the union keeps the best
    score for a dense pair seen under several matches (ties to the lower
    match id), and ``group_of`` records that match id.
    """
    if supermatches.level != "superpoint":
        raise ContractError("point_match needs superpoint-level matches")
    fp_all = _values(graph_p.dense_features)
    fq_all = _values(graph_q.dense_features)
    alpha = float(_values(dustbin).reshape(-1)[0])
    best: dict[tuple[int, int], tuple[float, int]] = {}
    for gid, (sx, sy) in enumerate(supermatches.pairs.tolist()):
        rows = graph_p.patches[sx]
        cols = graph_q.patches[sy]
        log_z = _backend.kernels.sinkhorn_log(patch_scores(fp_all[rows], fq_all[cols]), alpha, int(iters))
        z_aug = np.exp(log_z)
        keep = np.nonzero(mutual_topk(z_aug, k_mutual))
        for lx, ly in zip(*keep):
            key = (int(rows[lx]), int(cols[ly]))
            score = float(z_aug[lx, ly])
            prev = best.get(key)
            if prev is None or score > prev[0]:
                best[key] = (score, gid)
    if not best:
        return CorrespondenceSet.empty("point")
    keys = sorted(best)
    return CorrespondenceSet(
        "point",
        keys,
        [best[k][0] for k in keys],
        [best[k][1] for k in keys],
    )
