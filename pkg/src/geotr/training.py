"""Supervision, losses and a small Adam training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cloud import RigidTransform, SuperpointGraph, radius_search
from .errors import ConfigError, LossError, TrainingError
from .matching import AssignmentMatrix, sinkhorn_batched

POSITIVE_OVERLAP = 0.1
# margin used to mask entries out of a log-sum-exp
_MASKED = -1e9


@dataclass(frozen=True)
class LossConfig:
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 24.0
    n_g: int = 128
    tau: float | None = None  # defaults to the dense voxel size

    def __post_init__(self):
        if not self.delta_p < self.delta_n:
            raise ConfigError("delta_p must be smaller than delta_n")
        if self.n_g < 1:
            raise ConfigError("n_g must be positive")


# ---------------------------------------------------------------------------
# overlap supervision
# ---------------------------------------------------------------------------


def directional_overlap(graph_p: SuperpointGraph, graph_q: SuperpointGraph, t_gt: RigidTransform,
                        tau: float) -> np.ndarray:
    """``o[i, j]``: fraction of patch ``i`` of P within ``tau`` of some point of patch ``j`` of Q."""
    moved = t_gt.apply(graph_p.dense_points)
    offsets, idx, _ = radius_search(moved, graph_q.dense_points, tau)
    owner = np.repeat(np.arange(len(moved)), np.diff(offsets))
    hits = np.unique(np.stack([owner, graph_q.patch_of[idx]], axis=1), axis=0)
    o = np.zeros((graph_p.num_super, graph_q.num_super))
    np.add.at(o, (graph_p.patch_of[hits[:, 0]], hits[:, 1]), 1.0)
    sizes = np.array([len(p) for p in graph_p.patches], dtype=np.float64)
    return o / sizes[:, None]


@dataclass
class OverlapTable:
    """Overlap ratios in both directions, both indexed ``[i_P, j_Q]``.

    ``o`` is measured from P's patches, ``o_rev`` from Q's.
    """

    o: np.ndarray
    o_rev: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return self.o >= POSITIVE_OVERLAP

    @property
    def negatives(self) -> np.ndarray:
        return self.o == 0

    @property
    def anchors(self) -> np.ndarray:
        return np.nonzero(self.positives.any(axis=1))[0]

    @property
    def positives_rev(self) -> np.ndarray:
        return self.o_rev >= POSITIVE_OVERLAP

    @property
    def negatives_rev(self) -> np.ndarray:
        return self.o_rev == 0

    def positive_pairs(self) -> np.ndarray:
        return np.argwhere(self.positives)


def compute_overlap(graph_p, graph_q, t_gt: RigidTransform, tau: float) -> OverlapTable:
    fwd = directional_overlap(graph_p, graph_q, t_gt, tau)
    rev = directional_overlap(graph_q, graph_p, t_gt.inverse(), tau)
    return OverlapTable(fwd, rev.T.copy())


# ---------------------------------------------------------------------------
# overlap-aware circle loss
# ---------------------------------------------------------------------------


def unit_rows(x) -> ad.Tensor:
    x = ad.as_tensor(x)
    return ad.div(x, ad.reshape(ad.row_norms(x), (x.shape[0], 1)))


def feature_distances(hp, hq) -> ad.Tensor:
    """Pairwise distances between unit-normalised rows."""
    a, b = unit_rows(hp), unit_rows(hq)
    d2 = ad.sub(2.0, ad.mul(2.0, ad.matmul(a, ad.transpose(b))))
    d2 = ad.where(d2.value > 1e-12, d2, 1e-12)
    return ad.sqrt(d2)


def _softplus(x) -> ad.Tensor:
    x = ad.as_tensor(x)
    zeros = np.zeros(x.shape + (1,))
    return ad.logsumexp(ad.concat([zeros, ad.reshape(x, x.shape + (1,))], axis=-1), axis=-1)


def _directional_circle(d, overlap, pos, neg, cfg: LossConfig):
    """Mean over anchor rows of ``log(1 + sum_pos ... * sum_neg ...)``."""
    anchors = pos.any(axis=1)
    if not anchors.any():
        return None
    dv = d.value
    beta_p = cfg.gamma * np.maximum(dv - cfg.delta_p, 0.0)
    beta_n = cfg.gamma * np.maximum(cfg.delta_n - dv, 0.0)
    lam = np.sqrt(overlap)
    pos_logit = ad.mul(ad.sub(d, cfg.delta_p), lam * beta_p)
    neg_logit = ad.mul(ad.sub(cfg.delta_n, d), beta_n)
    pos_lse = ad.logsumexp(ad.where(pos, pos_logit, _MASKED), axis=1)
    neg_lse = ad.logsumexp(ad.where(neg, neg_logit, _MASKED), axis=1)
    per_row = _softplus(ad.add(pos_lse, neg_lse))
    return ad.div(ad.sum_(ad.mul(per_row, anchors.astype(np.float64))), float(anchors.sum()))


def overlap_circle_loss(hp, hq, table: OverlapTable, cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """Symmetric overlap-weighted circle loss on unit-normalised features.

    Positive terms are scaled by the square root of the overlap ratio; the
    per-sample weights ``beta`` are clamped at zero and held constant.
    """
    d = feature_distances(hp, hq)
    lp = _directional_circle(d, table.o, table.positives, table.negatives, cfg)
    dt = ad.transpose(d)
    lq = _directional_circle(dt, table.o_rev.T, table.positives_rev.T, table.negatives_rev.T, cfg)
    parts = [x for x in (lp, lq) if x is not None]
    if not parts:
        raise LossError("no anchor patch in either direction")
    if len(parts) == 1:
        return parts[0]
    return ad.mul(ad.add(parts[0], parts[1]), 0.5)


# ---------------------------------------------------------------------------
# point matching supervision and loss
# ---------------------------------------------------------------------------


@dataclass
class PatchGT:
    """Ground truth for one patch pair, in patch-local indices."""

    matches: np.ndarray  # (K, 2)
    unmatched_p: np.ndarray
    unmatched_q: np.ndarray
    n: int = 0
    m: int = 0


def make_gt_point_matches(patch_p, patch_q, t_gt: RigidTransform, tau: float) -> PatchGT:
    """Mutual nearest neighbours closer than ``tau`` once P is moved by ``t_gt``."""
    a = t_gt.apply(patch_p)
    b = np.asarray(patch_q, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    row_nn = np.argmin(d, axis=1)
    col_nn = np.argmin(d, axis=0)
    rows = np.arange(len(a))
    keep = (col_nn[row_nn] == rows) & (d[rows, row_nn] < tau)
    matches = np.stack([rows[keep], row_nn[keep]], axis=1).astype(np.int64)
    return PatchGT(
        matches,
        np.setdiff1d(rows, matches[:, 0]),
        np.setdiff1d(np.arange(len(b)), matches[:, 1]),
        len(a),
        len(b),
    )


def point_matching_loss(log_assign, gts: list[PatchGT]) -> ad.Tensor:
    """Mean negative log-likelihood over the given patch pairs.

    ``log_assign`` is an :class:`AssignmentMatrix` or a log tensor shaped
    ``(n+1, m+1)`` or ``(B, n+1, m+1)``; the dustbin is the last row and
    column. Padded entries are never read.
    """
    if isinstance(log_assign, AssignmentMatrix):
        log_assign = log_assign.log_augmented
    log_assign = ad.as_tensor(log_assign)
    single = log_assign.ndim == 2
    if single:
        log_assign = ad.reshape(log_assign, (1,) + log_assign.shape)
    b, n1, m1 = log_assign.shape
    if len(gts) != b:
        raise LossError(f"{len(gts)} ground-truth sets for {b} assignment matrices")
    if b == 0:
        return ad.Tensor(0.0)
    w = np.zeros((b, n1, m1))
    for i, gt in enumerate(gts):
        if len(gt.matches):
            np.add.at(w[i], (gt.matches[:, 0], gt.matches[:, 1]), 1.0)
        w[i, gt.unmatched_p, m1 - 1] += 1.0
        w[i, n1 - 1, gt.unmatched_q] += 1.0
    return ad.div(ad.neg(ad.sum_(ad.mul(log_assign, w))), float(b))


def patch_batch_scores(fp, fq, rows_list, cols_list):
    """Padded ``(B, n, m)`` score tensor for a list of patch pairs."""
    fp, fq = ad.as_tensor(fp), ad.as_tensor(fq)
    n = max(len(r) for r in rows_list)
    m = max(len(c) for c in cols_list)
    ri = np.zeros((len(rows_list), n), dtype=np.int64)
    ci = np.zeros((len(cols_list), m), dtype=np.int64)
    for i, (r, c) in enumerate(zip(rows_list, cols_list)):
        ri[i, : len(r)] = r
        ci[i, : len(c)] = c
    a = ad.getitem(fp, ri)
    bq = ad.getitem(fq, ci)
    scores = ad.mul(ad.einsum("bnd,bmd->bnm", a, bq), 1.0 / math.sqrt(fp.shape[1]))
    return scores, np.array([len(r) for r in rows_list]), np.array([len(c) for c in cols_list])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, ad.Tensor], grads: dict, lr: float | None = None) -> None:
        """Update ``params`` in place; ``grads`` maps leaf tensors to arrays."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(p.value))
            v = self.v.get(name, np.zeros_like(p.value))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainPair:
    """A graph pair with everything needed for supervision precomputed."""

    graph_p: SuperpointGraph
    graph_q: SuperpointGraph
    t_gt: RigidTransform
    tau: float
    table: OverlapTable = None
    gts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.table is None:
            self.table = compute_overlap(self.graph_p, self.graph_q, self.t_gt, self.tau)

    def patch_gt(self, i: int, j: int) -> PatchGT:
        key = (i, j)
        if key not in self.gts:
            self.gts[key] = make_gt_point_matches(
                self.graph_p.dense_points[self.graph_p.patches[i]],
                self.graph_q.dense_points[self.graph_q.patches[j]],
                self.t_gt,
                self.tau,
            )
        return self.gts[key]


def sample_gt_superpoint_matches(table: OverlapTable, n_g: int, rng) -> np.ndarray:
    pos = table.positive_pairs()
    if len(pos) <= n_g:
        return pos
    return pos[np.sort(rng.choice(len(pos), n_g, replace=False))]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 1.0  # multiplicative per step
    steps: int = 100
    seed: int = 0
    sinkhorn_iters: int = 10


@dataclass
class StepResult:
    loss_oc: float
    loss_p: float
    lr: float

    @property
    def total(self):
        return self.loss_oc + self.loss_p


def compute_losses(model, pair: TrainPair, loss_cfg: LossConfig, iters: int, rng):
    """Forward pass on the active tape; returns ``(loss_oc, loss_p)`` tensors."""
    hp, hq = model.forward(pair.graph_p, pair.graph_q)
    loss_oc = overlap_circle_loss(hp, hq, pair.table, loss_cfg)
    chosen = sample_gt_superpoint_matches(pair.table, loss_cfg.n_g, rng)
    if len(chosen) == 0:
        return loss_oc, ad.Tensor(0.0)
    gp, gq = pair.graph_p, pair.graph_q
    rows = [gp.patches[i] for i, _ in chosen]
    cols = [gq.patches[j] for _, j in chosen]
    scores, nv, mv = patch_batch_scores(gp.dense_features, gq.dense_features, rows, cols)
    log_z = sinkhorn_batched(scores, model.params["dustbin"], iters, nv, mv)
    loss_p = point_matching_loss(log_z, [pair.patch_gt(int(i), int(j)) for i, j in chosen])
    return loss_oc, loss_p


def train_step(model, pair: TrainPair, opt: Adam, loss_cfg: LossConfig = LossConfig(),
               lr: float | None = None, iters: int = 10, rng=None) -> StepResult:
    """One forward/backward/update. Non-finite losses abort before any update."""
    rng = np.random.default_rng(0) if rng is None else rng
    lr = opt.lr if lr is None else lr
    with ad.Tape() as tape:
        loss_oc, loss_p = compute_losses(model, pair, loss_cfg, iters, rng)
        total = ad.add(loss_oc, loss_p)
    if not np.isfinite(total.value).all():
        raise TrainingError(f"non-finite loss (oc={loss_oc.item()}, p={loss_p.item()})")
    grads = tape.backward(total)
    opt.step(model.params, grads, lr)
    return StepResult(loss_oc.item(), loss_p.item(), lr)


def train(model, pairs: list[TrainPair], cfg: TrainConfig, loss_cfg: LossConfig = LossConfig(),
          log_path=None, callback=None) -> list[StepResult]:
    """Cycle through ``pairs`` for ``cfg.steps`` steps with exponential lr decay."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    history = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            lr = cfg.lr * cfg.decay**step
            res = train_step(model, pairs[step % len(pairs)], opt, loss_cfg, lr, cfg.sinkhorn_iters, rng)
            history.append(res)
            if log:
                log.write(json.dumps({"step": step, "loss_oc": res.loss_oc, "loss_p": res.loss_p, "lr": lr}) + "\n")
            if callback:
                callback(step, res)
    finally:
        if log:
            log.close()
    return history
