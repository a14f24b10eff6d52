"""Pure-Python reference kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``GEOTR_PURE_PYTHON=1`` is set.
"""

import heapq
import math

import numpy as np

NAME = "python"

_JACOBI_SWEEPS = 60


def _jacobi_eigen3(a):
    """Eigen-decomposition of a symmetric 3x3 (nested lists), cyclic Jacobi."""
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    for _ in range(_JACOBI_SWEEPS):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2]
        if off <= 1e-36 * diag or off == 0.0:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            for r in range(3):
                arp = a[r][p]
                arq = a[r][q]
                a[r][p] = c * arp - s * arq
                a[r][q] = s * arp + c * arq
            for r in range(3):
                apr = a[p][r]
                aqr = a[q][r]
                a[p][r] = c * apr - s * aqr
                a[q][r] = s * apr + c * aqr
            for r in range(3):
                vrp = v[r][p]
                vrq = v[r][q]
                v[r][p] = c * vrp - s * vrq
                v[r][q] = s * vrp + c * vrq
    return [a[0][0], a[1][1], a[2][2]], v


def _cross(a, b):
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _unit(a):
    n = math.sqrt(_dot(a, a))
    return [a[0] / n, a[1] / n, a[2] / n], n


def _perpendicular(u):
    # axis least aligned with u keeps the cross product well conditioned
    ax = min(range(3), key=lambda i: (abs(u[i]), i))
    e = [0.0, 0.0, 0.0]
    e[ax] = 1.0
    return _unit(_cross(u, e))[0]


def _sort_svd(ucols, s, vcols):
    """Reorder triplets so ``s`` is descending (guards underflowed eigenvalues)."""
    order = sorted(range(3), key=lambda i: (-s[i], i))
    return [ucols[i] for i in order], [s[i] for i in order], [vcols[i] for i in order]


def _svd3_lists(m):
    # a power-of-two rescale keeps m^T m clear of under/overflow without rounding
    peak = max(abs(x) for row in m for x in row)
    if peak > 0.0 and math.isfinite(peak):
        scale = math.ldexp(1.0, math.frexp(peak)[1])
        ucols, s, vcols = _svd3_unit([[x / scale for x in row] for row in m])
        return _sort_svd(ucols, [x * scale for x in s], vcols)
    return _sort_svd(*_svd3_unit(m))


def _svd3_unit(m):
    mtm = [[sum(m[k][i] * m[k][j] for k in range(3)) for j in range(3)] for i in range(3)]
    w, v = _jacobi_eigen3(mtm)
    order = sorted(range(3), key=lambda i: (-w[i], i))
    vcols = [[v[0][i], v[1][i], v[2][i]] for i in order]
    mv = [[_dot(m[r], vc) for r in range(3)] for vc in vcols]

    n0 = math.sqrt(_dot(mv[0], mv[0]))
    if n0 > 1e-300:
        u0 = [x / n0 for x in mv[0]]
    else:
        u0, n0 = [1.0, 0.0, 0.0], 0.0
    proj = _dot(mv[1], u0)
    r1 = [mv[1][i] - proj * u0[i] for i in range(3)]
    n1 = math.sqrt(_dot(r1, r1))
    if n1 > 1e-300 and n1 > 1e-15 * n0:
        u1 = [x / n1 for x in r1]
    else:
        u1 = _perpendicular(u0)
    u2 = _cross(u0, u1)
    s0 = _dot(u0, mv[0])
    s1 = _dot(u1, mv[1])
    s2 = _dot(u2, mv[2])
    if s1 < 0.0:
        u1 = [-x for x in u1]
        u2 = [-x for x in u2]
        s1 = -s1
        s2 = -s2
    if s2 < 0.0:
        u2 = [-x for x in u2]
        s2 = -s2
    return [u0, u1, u2], [s0, s1, s2], vcols


def svd3(m):
    mm = [[float(x) for x in row] for row in np.asarray(m)]
    ucols, s, vcols = _svd3_lists(mm)
    u = np.array(ucols, dtype=np.float64).T
    v = np.array(vcols, dtype=np.float64).T
    return u, np.array(s, dtype=np.float64), v


def _kabsch_lists(src, dst, w):
    """Weighted Kabsch on small point lists; returns (R, t, s) or None."""
    wsum = sum(w)
    if not wsum > 0.0:
        return None
    cp = [sum(w[i] * src[i][d] for i in range(len(w))) / wsum for d in range(3)]
    cq = [sum(w[i] * dst[i][d] for i in range(len(w))) / wsum for d in range(3)]
    h = [[0.0] * 3 for _ in range(3)]
    for i in range(len(w)):
        a = [src[i][d] - cp[d] for d in range(3)]
        b = [dst[i][d] - cq[d] for d in range(3)]
        wi = w[i]
        for r in range(3):
            for c in range(3):
                h[r][c] += wi * a[r] * b[c]
    ucols, s, vcols = _svd3_lists(h)
    if s[0] <= 1e-300 or s[1] <= 1e-12 * s[0]:
        return None
    # R = V diag(1, 1, d) U^T
    det = _dot(_cross(vcols[0], vcols[1]), vcols[2]) * _dot(_cross(ucols[0], ucols[1]), ucols[2])
    sign = 1.0 if det >= 0.0 else -1.0
    rot = [[0.0] * 3 for _ in range(3)]
    for r in range(3):
        for c in range(3):
            rot[r][c] = (
                vcols[0][r] * ucols[0][c]
                + vcols[1][r] * ucols[1][c]
                + sign * vcols[2][r] * ucols[2][c]
            )
    t = [cq[r] - (rot[r][0] * cp[0] + rot[r][1] * cp[1] + rot[r][2] * cp[2]) for r in range(3)]
    return rot, t, s


def kabsch(src, dst, weights):
    """Weighted rigid fit ``dst ~ R @ src + t``.

    Returns ``(R, t, ok)``; ``ok`` is False for degenerate (collinear or
    zero-weight) input, in which case ``R`` and ``t`` are identity/zero.
    """
    res = _kabsch_lists(np.asarray(src).tolist(), np.asarray(dst).tolist(), np.asarray(weights).tolist())
    if res is None:
        return np.eye(3), np.zeros(3), False
    rot, t, _ = res
    return np.array(rot), np.array(t), True


# ---------------------------------------------------------------------------
# k-d tree queries
# ---------------------------------------------------------------------------


def _box_lb(q, lo, hi):
    acc = 0.0
    for d in range(3):
        if q[d] < lo[d]:
            x = lo[d] - q[d]
            acc += x * x
        elif q[d] > hi[d]:
            x = q[d] - hi[d]
            acc += x * x
    return acc


def kd_knn(points, perm, start, end, left, right, lo, hi, queries, k):
    """k nearest neighbours of each query, sorted by (distance, index)."""
    pts = np.asarray(points).tolist()
    perm = perm.tolist()
    start, end, left, right = start.tolist(), end.tolist(), left.tolist(), right.tolist()
    lo, hi = lo.tolist(), hi.tolist()
    nq = len(queries)
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_dist = np.empty((nq, k), dtype=np.float64)
    for qi, q in enumerate(np.asarray(queries).tolist()):
        # max-heap of (-d2, -idx): worst candidate at the top
        heap = []
        stack = [(0.0, 0)]
        while stack:
            lb, node = stack.pop()
            if len(heap) == k and lb > -heap[0][0]:
                continue
            if left[node] < 0:
                for j in range(start[node], end[node]):
                    idx = perm[j]
                    p = pts[idx]
                    dx = q[0] - p[0]
                    dy = q[1] - p[1]
                    dz = q[2] - p[2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if len(heap) < k:
                        heapq.heappush(heap, (-d2, -idx))
                    elif (d2, idx) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, (-d2, -idx))
                continue
            a, b = left[node], right[node]
            la = _box_lb(q, lo[a], hi[a])
            lb_ = _box_lb(q, lo[b], hi[b])
            if la <= lb_:
                stack.append((lb_, b))
                stack.append((la, a))
            else:
                stack.append((la, a))
                stack.append((lb_, b))
        best = sorted((-d, -i) for d, i in heap)
        for r, (d2, idx) in enumerate(best):
            out_idx[qi, r] = idx
            out_dist[qi, r] = math.sqrt(d2)
    return out_idx, out_dist


def kd_radius(points, perm, start, end, left, right, lo, hi, queries, radius):
    """All points strictly within ``radius`` of each query, CSR layout."""
    pts = np.asarray(points).tolist()
    perm = perm.tolist()
    start, end, left, right = start.tolist(), end.tolist(), left.tolist(), right.tolist()
    lo, hi = lo.tolist(), hi.tolist()
    r2 = radius * radius
    offsets = [0]
    all_idx = []
    all_dist = []
    for q in np.asarray(queries).tolist():
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            if _box_lb(q, lo[node], hi[node]) >= r2:
                continue
            if left[node] >= 0:
                stack.append(right[node])
                stack.append(left[node])
                continue
            for j in range(start[node], end[node]):
                idx = perm[j]
                p = pts[idx]
                dx = q[0] - p[0]
                dy = q[1] - p[1]
                dz = q[2] - p[2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < r2:
                    found.append((d2, idx))
        found.sort()
        all_idx.extend(i for _, i in found)
        all_dist.extend(math.sqrt(d) for d, _ in found)
        offsets.append(len(all_idx))
    return (
        np.array(offsets, dtype=np.int64),
        np.array(all_idx, dtype=np.int64),
        np.array(all_dist, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# optimal transport
# ---------------------------------------------------------------------------


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_log(scores, alpha, iters):
    """Log-domain Sinkhorn on the dustbin-augmented score matrix.

    Returns the ``(n+1, m+1)`` log-assignment whose exponent has row sums
    ``(1, ..., 1, m)`` and column sums ``(1, ..., 1, n)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    z = np.full((n + 1, m + 1), float(alpha))
    z[:n, :m] = scores
    norm = -math.log(n + m)
    log_mu = np.full(n + 1, norm)
    log_mu[n] = math.log(m) + norm
    log_nu = np.full(m + 1, norm)
    log_nu[m] = math.log(n) + norm
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    for _ in range(iters):
        u = log_mu - _lse(z + v[None, :], 1)
        v = log_nu - _lse(z + u[:, None], 0)
    return z + u[:, None] + v[None, :] - norm


# ---------------------------------------------------------------------------
# robust estimation
# ---------------------------------------------------------------------------


def _residual_norms(src, dst, rot, t):
    x = rot[0][0] * src[:, 0] + rot[0][1] * src[:, 1] + rot[0][2] * src[:, 2] + t[0] - dst[:, 0]
    y = rot[1][0] * src[:, 0] + rot[1][1] * src[:, 1] + rot[1][2] * src[:, 2] + t[1] - dst[:, 1]
    z = rot[2][0] * src[:, 0] + rot[2][1] * src[:, 1] + rot[2][2] * src[:, 2] + t[2] - dst[:, 2]
    return np.sqrt(x * x + y * y + z * z)


def count_inliers_many(src, dst, rots, ts, tau):
    """Inlier count and summed inlier residual for each candidate pose."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    counts = np.zeros(len(rots), dtype=np.int64)
    sums = np.zeros(len(rots), dtype=np.float64)
    for c, (rot, t) in enumerate(zip(rots, ts)):
        res = _residual_norms(src, dst, rot, t)
        mask = res < tau
        counts[c] = int(mask.sum())
        sums[c] = float(res[mask].sum())
    return counts, sums


def ransac(src, dst, samples, tau):
    """Score every 3-point hypothesis; return (best sample row, inlier count).

    The first hypothesis reaching the maximum count wins. Degenerate
    triplets are skipped. Returns ``(-1, 0)`` if every triplet is degenerate.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    sl = src.tolist()
    dl = dst.tolist()
    best, best_count = -1, 0
    for it, (a, b, c) in enumerate(np.asarray(samples).tolist()):
        res = _kabsch_lists([sl[a], sl[b], sl[c]], [dl[a], dl[b], dl[c]], [1.0, 1.0, 1.0])
        if res is None:
            continue
        rot, t, _ = res
        count = int((_residual_norms(src, dst, rot, t) < tau).sum())
        if count > best_count:
            best, best_count = it, count
    return best, best_count
