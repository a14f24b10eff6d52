# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# distutils: language = c++
"""Compiled kernels; mirrors ``_pykernels`` function by function."""

import numpy as np
cimport numpy as cnp
from libc.float cimport DBL_MAX
from libc.math cimport sqrt, log, exp, fabs, frexp, ldexp, INFINITY
from libcpp.vector cimport vector

cnp.import_array()

NAME = "cython"

DEF JACOBI_SWEEPS = 60


cdef void _jacobi_eigen3(double a[3][3], double w[3], double v[3][3]) noexcept nogil:
    cdef int sweep, r, k, p, q
    cdef double off, diag, apq, theta, t, c, s, x, y
    cdef int ps[3]
    cdef int qs[3]
    ps[0] = 0; qs[0] = 1
    ps[1] = 0; qs[1] = 2
    ps[2] = 1; qs[2] = 2
    for r in range(3):
        for k in range(3):
            v[r][k] = 1.0 if r == k else 0.0
    for sweep in range(JACOBI_SWEEPS):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2]
        if off <= 1e-36 * diag or off == 0.0:
            break
        for k in range(3):
            p = ps[k]
            q = qs[k]
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / sqrt(t * t + 1.0)
            s = t * c
            for r in range(3):
                x = a[r][p]
                y = a[r][q]
                a[r][p] = c * x - s * y
                a[r][q] = s * x + c * y
            for r in range(3):
                x = a[p][r]
                y = a[q][r]
                a[p][r] = c * x - s * y
                a[q][r] = s * x + c * y
            for r in range(3):
                x = v[r][p]
                y = v[r][q]
                v[r][p] = c * x - s * y
                v[r][q] = s * x + c * y
    w[0] = a[0][0]
    w[1] = a[1][1]
    w[2] = a[2][2]


cdef inline double _dot3(double* a, double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void _cross3(double* a, double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef void _perpendicular(double* u, double* out) noexcept nogil:
    cdef int ax = 0
    cdef int i
    cdef double e[3]
    cdef double n
    for i in range(1, 3):
        if fabs(u[i]) < fabs(u[ax]):
            ax = i
    e[0] = 0.0; e[1] = 0.0; e[2] = 0.0
    e[ax] = 1.0
    _cross3(u, e, out)
    n = sqrt(_dot3(out, out))
    for i in range(3):
        out[i] = out[i] / n


cdef void _svd3(double m[3][3], double ucols[3][3], double s[3], double vcols[3][3]) noexcept nogil:
    """Column-vector layout: ucols[i] is the i-th left singular vector."""
    cdef double a[3][3]
    cdef double peak = 0.0, scale = 1.0, tmp
    cdef int i, j, k, e
    for i in range(3):
        for j in range(3):
            if fabs(m[i][j]) > peak:
                peak = fabs(m[i][j])
    if peak > 0.0 and peak <= DBL_MAX:
        frexp(peak, &e)
        scale = ldexp(1.0, e)
    for i in range(3):
        for j in range(3):
            a[i][j] = m[i][j] / scale
    _svd3_unit(a, ucols, s, vcols)
    for i in range(3):
        s[i] = s[i] * scale
    # descending order; swaps keep U diag(s) V^T unchanged
    for i in range(3):
        for j in range(2 - i):
            if s[j + 1] > s[j]:
                tmp = s[j]; s[j] = s[j + 1]; s[j + 1] = tmp
                for k in range(3):
                    tmp = ucols[j][k]; ucols[j][k] = ucols[j + 1][k]; ucols[j + 1][k] = tmp
                    tmp = vcols[j][k]; vcols[j][k] = vcols[j + 1][k]; vcols[j + 1][k] = tmp


cdef void _svd3_unit(double m[3][3], double ucols[3][3], double s[3], double vcols[3][3]) noexcept nogil:
    cdef double mtm[3][3]
    cdef double w[3]
    cdef double v[3][3]
    cdef double mv[3][3]
    cdef double r1[3]
    cdef int order[3]
    cdef int i, j, k, tmp
    cdef double n0, n1, proj
    for i in range(3):
        for j in range(3):
            mtm[i][j] = m[0][i] * m[0][j] + m[1][i] * m[1][j] + m[2][i] * m[2][j]
    _jacobi_eigen3(mtm, w, v)
    order[0] = 0; order[1] = 1; order[2] = 2
    # stable descending sort of three values
    for i in range(3):
        for j in range(2 - i):
            if w[order[j + 1]] > w[order[j]]:
                tmp = order[j]
                order[j] = order[j + 1]
                order[j + 1] = tmp
    for i in range(3):
        for k in range(3):
            vcols[i][k] = v[k][order[i]]
        for k in range(3):
            mv[i][k] = _dot3(m[k], vcols[i])

    n0 = sqrt(_dot3(mv[0], mv[0]))
    if n0 > 1e-300:
        for k in range(3):
            ucols[0][k] = mv[0][k] / n0
    else:
        ucols[0][0] = 1.0; ucols[0][1] = 0.0; ucols[0][2] = 0.0
        n0 = 0.0
    proj = _dot3(mv[1], ucols[0])
    for k in range(3):
        r1[k] = mv[1][k] - proj * ucols[0][k]
    n1 = sqrt(_dot3(r1, r1))
    if n1 > 1e-300 and n1 > 1e-15 * n0:
        for k in range(3):
            ucols[1][k] = r1[k] / n1
    else:
        _perpendicular(ucols[0], ucols[1])
    _cross3(ucols[0], ucols[1], ucols[2])
    s[0] = _dot3(ucols[0], mv[0])
    s[1] = _dot3(ucols[1], mv[1])
    s[2] = _dot3(ucols[2], mv[2])
    if s[1] < 0.0:
        for k in range(3):
            ucols[1][k] = -ucols[1][k]
            ucols[2][k] = -ucols[2][k]
        s[1] = -s[1]
        s[2] = -s[2]
    if s[2] < 0.0:
        for k in range(3):
            ucols[2][k] = -ucols[2][k]
        s[2] = -s[2]


def svd3(m):
    cdef double[:, ::1] mm = np.ascontiguousarray(m, dtype=np.float64)
    cdef double a[3][3]
    cdef double ucols[3][3]
    cdef double s[3]
    cdef double vcols[3][3]
    cdef int i, j
    for i in range(3):
        for j in range(3):
            a[i][j] = mm[i, j]
    _svd3(a, ucols, s, vcols)
    u = np.empty((3, 3))
    v = np.empty((3, 3))
    sv = np.empty(3)
    cdef double[:, ::1] uu = u
    cdef double[:, ::1] vv = v
    cdef double[::1] ss = sv
    for i in range(3):
        ss[i] = s[i]
        for j in range(3):
            uu[j, i] = ucols[i][j]
            vv[j, i] = vcols[i][j]
    return u, sv, v


cdef bint _kabsch(const double[:, ::1] src, const double[:, ::1] dst, const double* w,
                  const long* idx, int n, double rot[3][3], double t[3]) noexcept nogil:
    """Weighted Kabsch over rows ``idx[0..n)``; False when degenerate."""
    cdef double wsum = 0.0
    cdef double cp[3]
    cdef double cq[3]
    cdef double h[3][3]
    cdef double ucols[3][3]
    cdef double s[3]
    cdef double vcols[3][3]
    cdef double a[3]
    cdef double b[3]
    cdef double tmp[3]
    cdef double det, sign, wi
    cdef int i, r, c
    cdef long row
    for r in range(3):
        cp[r] = 0.0
        cq[r] = 0.0
        for c in range(3):
            h[r][c] = 0.0
    for i in range(n):
        wsum += w[i]
    if not wsum > 0.0:
        return False
    for r in range(3):
        for i in range(n):
            row = idx[i]
            cp[r] += w[i] * src[row, r]
            cq[r] += w[i] * dst[row, r]
        cp[r] = cp[r] / wsum
        cq[r] = cq[r] / wsum
    for i in range(n):
        row = idx[i]
        wi = w[i]
        for r in range(3):
            a[r] = src[row, r] - cp[r]
            b[r] = dst[row, r] - cq[r]
        for r in range(3):
            for c in range(3):
                h[r][c] += wi * a[r] * b[c]
    _svd3(h, ucols, s, vcols)
    if s[0] <= 1e-300 or s[1] <= 1e-12 * s[0]:
        return False
    _cross3(vcols[0], vcols[1], tmp)
    det = _dot3(tmp, vcols[2])
    _cross3(ucols[0], ucols[1], tmp)
    det = det * _dot3(tmp, ucols[2])
    sign = 1.0 if det >= 0.0 else -1.0
    for r in range(3):
        for c in range(3):
            rot[r][c] = (vcols[0][r] * ucols[0][c]
                         + vcols[1][r] * ucols[1][c]
                         + sign * vcols[2][r] * ucols[2][c])
    for r in range(3):
        t[r] = cq[r] - (rot[r][0] * cp[0] + rot[r][1] * cp[1] + rot[r][2] * cp[2])
    return True


def kabsch(src, dst, weights):
    cdef double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef long[::1] idx = np.arange(s.shape[0], dtype=np.int64)
    cdef double rot[3][3]
    cdef double t[3]
    cdef int r, c
    if s.shape[0] == 0:
        return np.eye(3), np.zeros(3), False
    ok = _kabsch(s, d, &w[0], &idx[0], s.shape[0], rot, t)
    if not ok:
        return np.eye(3), np.zeros(3), False
    R = np.empty((3, 3))
    T = np.empty(3)
    for r in range(3):
        T[r] = t[r]
        for c in range(3):
            R[r, c] = rot[r][c]
    return R, T, True


# ---------------------------------------------------------------------------
# k-d tree queries
# ---------------------------------------------------------------------------


cdef inline double _box_lb(const double* q, const double[:, ::1] lo, const double[:, ::1] hi,
                           long node) noexcept nogil:
    cdef double acc = 0.0
    cdef double x
    cdef int d
    for d in range(3):
        if q[d] < lo[node, d]:
            x = lo[node, d] - q[d]
            acc += x * x
        elif q[d] > hi[node, d]:
            x = q[d] - hi[node, d]
            acc += x * x
    return acc


cdef inline bint _less(double da, long ia, double db, long ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


def kd_knn(points, perm, start, end, left, right, lo, hi, queries, long k):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long[::1] pm = np.ascontiguousarray(perm, dtype=np.int64)
    cdef const long[::1] st = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long[::1] en = np.ascontiguousarray(end, dtype=np.int64)
    cdef const long[::1] lf = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long[::1] rt = np.ascontiguousarray(right, dtype=np.int64)
    cdef const double[:, ::1] blo = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] bhi = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef long nq = qs.shape[0]
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_dist = np.empty((nq, k), dtype=np.float64)
    cdef long[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_dist
    cdef vector[long] stack_node
    cdef vector[double] stack_lb
    cdef vector[double] bd
    cdef vector[long] bi
    cdef double q[3]
    cdef long qi, node, j, idx, a, b, pos, filled
    cdef double lb, la, lbb, d2, dx, dy, dz
    bd.resize(k)
    bi.resize(k)
    with nogil:
        for qi in range(nq):
            q[0] = qs[qi, 0]; q[1] = qs[qi, 1]; q[2] = qs[qi, 2]
            filled = 0
            for j in range(k):
                bd[j] = INFINITY
                bi[j] = -1
            stack_node.clear()
            stack_lb.clear()
            stack_node.push_back(0)
            stack_lb.push_back(0.0)
            while stack_node.size() > 0:
                node = stack_node.back()
                lb = stack_lb.back()
                stack_node.pop_back()
                stack_lb.pop_back()
                if filled == k and lb > bd[k - 1]:
                    continue
                if lf[node] < 0:
                    for j in range(st[node], en[node]):
                        idx = pm[j]
                        dx = q[0] - pts[idx, 0]
                        dy = q[1] - pts[idx, 1]
                        dz = q[2] - pts[idx, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if filled < k or _less(d2, idx, bd[k - 1], bi[k - 1]):
                            # insertion into the sorted candidate list
                            pos = filled if filled < k else k - 1
                            while pos > 0 and _less(d2, idx, bd[pos - 1], bi[pos - 1]):
                                bd[pos] = bd[pos - 1]
                                bi[pos] = bi[pos - 1]
                                pos -= 1
                            bd[pos] = d2
                            bi[pos] = idx
                            if filled < k:
                                filled += 1
                    continue
                a = lf[node]
                b = rt[node]
                la = _box_lb(q, blo, bhi, a)
                lbb = _box_lb(q, blo, bhi, b)
                if la <= lbb:
                    stack_node.push_back(b); stack_lb.push_back(lbb)
                    stack_node.push_back(a); stack_lb.push_back(la)
                else:
                    stack_node.push_back(a); stack_lb.push_back(la)
                    stack_node.push_back(b); stack_lb.push_back(lbb)
            for j in range(k):
                oi[qi, j] = bi[j]
                od[qi, j] = sqrt(bd[j])
    return out_idx, out_dist


def kd_radius(points, perm, start, end, left, right, lo, hi, queries, double radius):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long[::1] pm = np.ascontiguousarray(perm, dtype=np.int64)
    cdef const long[::1] st = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long[::1] en = np.ascontiguousarray(end, dtype=np.int64)
    cdef const long[::1] lf = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long[::1] rt = np.ascontiguousarray(right, dtype=np.int64)
    cdef const double[:, ::1] blo = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] bhi = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef long nq = qs.shape[0]
    cdef double r2 = radius * radius
    cdef vector[long] stack
    cdef vector[long] found_i
    cdef vector[double] found_d
    cdef vector[long] all_i
    cdef vector[double] all_d
    cdef double q[3]
    cdef long qi, node, j, idx, pos, m, base
    cdef double d2, dx, dy, dz, td
    cdef long ti
    offsets = np.empty(nq + 1, dtype=np.int64)
    cdef long[::1] off = offsets
    off[0] = 0
    with nogil:
        for qi in range(nq):
            q[0] = qs[qi, 0]; q[1] = qs[qi, 1]; q[2] = qs[qi, 2]
            found_i.clear()
            found_d.clear()
            stack.clear()
            stack.push_back(0)
            while stack.size() > 0:
                node = stack.back()
                stack.pop_back()
                if _box_lb(q, blo, bhi, node) >= r2:
                    continue
                if lf[node] >= 0:
                    stack.push_back(rt[node])
                    stack.push_back(lf[node])
                    continue
                for j in range(st[node], en[node]):
                    idx = pm[j]
                    dx = q[0] - pts[idx, 0]
                    dy = q[1] - pts[idx, 1]
                    dz = q[2] - pts[idx, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < r2:
                        found_i.push_back(idx)
                        found_d.push_back(d2)
            # insertion sort by (distance, index); neighbourhoods are small
            m = found_i.size()
            for j in range(1, m):
                td = found_d[j]
                ti = found_i[j]
                pos = j
                while pos > 0 and _less(td, ti, found_d[pos - 1], found_i[pos - 1]):
                    found_d[pos] = found_d[pos - 1]
                    found_i[pos] = found_i[pos - 1]
                    pos -= 1
                found_d[pos] = td
                found_i[pos] = ti
            for j in range(m):
                all_i.push_back(found_i[j])
                all_d.push_back(sqrt(found_d[j]))
            off[qi + 1] = all_i.size()
    total = all_i.size()
    idx_out = np.empty(total, dtype=np.int64)
    dist_out = np.empty(total, dtype=np.float64)
    cdef long[::1] io = idx_out
    cdef double[::1] do = dist_out
    for j in range(total):
        io[j] = all_i[j]
        do[j] = all_d[j]
    return offsets, idx_out, dist_out


# ---------------------------------------------------------------------------
# optimal transport
# ---------------------------------------------------------------------------


def sinkhorn_log(scores, double alpha, int iters):
    cdef const double[:, ::1] sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = sc.shape[0]
    cdef Py_ssize_t m = sc.shape[1]
    out = np.empty((n + 1, m + 1), dtype=np.float64)
    cdef double[:, ::1] z = out
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] log_mu = np.empty(n + 1)
    cdef double[::1] log_nu = np.empty(m + 1)
    cdef double norm = -log(<double>(n + m))
    cdef Py_ssize_t i, j
    cdef int it
    cdef double mx, acc, x
    with nogil:
        for i in range(n + 1):
            for j in range(m + 1):
                z[i, j] = sc[i, j] if (i < n and j < m) else alpha
        for i in range(n):
            log_mu[i] = norm
        log_mu[n] = log(<double>m) + norm
        for j in range(m):
            log_nu[j] = norm
        log_nu[m] = log(<double>n) + norm
        for it in range(iters):
            for i in range(n + 1):
                mx = -INFINITY
                for j in range(m + 1):
                    x = z[i, j] + v[j]
                    if x > mx:
                        mx = x
                acc = 0.0
                for j in range(m + 1):
                    acc += exp(z[i, j] + v[j] - mx)
                u[i] = log_mu[i] - (mx + log(acc))
            for j in range(m + 1):
                mx = -INFINITY
                for i in range(n + 1):
                    x = z[i, j] + u[i]
                    if x > mx:
                        mx = x
                acc = 0.0
                for i in range(n + 1):
                    acc += exp(z[i, j] + u[i] - mx)
                v[j] = log_nu[j] - (mx + log(acc))
        for i in range(n + 1):
            for j in range(m + 1):
                z[i, j] = z[i, j] + u[i] + v[j] - norm
    return out


# ---------------------------------------------------------------------------
# robust estimation
# ---------------------------------------------------------------------------


cdef inline double _residual(const double[:, ::1] src, const double[:, ::1] dst, long i,
                             double rot[3][3], double* t) noexcept nogil:
    cdef double x = rot[0][0] * src[i, 0] + rot[0][1] * src[i, 1] + rot[0][2] * src[i, 2] + t[0] - dst[i, 0]
    cdef double y = rot[1][0] * src[i, 0] + rot[1][1] * src[i, 1] + rot[1][2] * src[i, 2] + t[1] - dst[i, 1]
    cdef double z = rot[2][0] * src[i, 0] + rot[2][1] * src[i, 1] + rot[2][2] * src[i, 2] + t[2] - dst[i, 2]
    return sqrt(x * x + y * y + z * z)


def count_inliers_many(src, dst, rots, ts, double tau):
    cdef const double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rots, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[:, ::1] T = np.ascontiguousarray(ts, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t nc = R.shape[0]
    cdef Py_ssize_t n = s.shape[0]
    counts = np.zeros(nc, dtype=np.int64)
    sums = np.zeros(nc, dtype=np.float64)
    cdef long[::1] cv = counts
    cdef double[::1] sv = sums
    cdef double rot[3][3]
    cdef double t[3]
    cdef double res, acc
    cdef long cnt
    cdef Py_ssize_t c, i, r, k
    with nogil:
        for c in range(nc):
            for r in range(3):
                t[r] = T[c, r]
                for k in range(3):
                    rot[r][k] = R[c, r, k]
            cnt = 0
            acc = 0.0
            for i in range(n):
                res = _residual(s, d, i, rot, t)
                if res < tau:
                    cnt += 1
                    acc += res
            cv[c] = cnt
            sv[c] = acc
    return counts, sums


def ransac(src, dst, samples, double tau):
    cdef const double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef const long[:, ::1] smp = np.ascontiguousarray(samples, dtype=np.int64)
    cdef Py_ssize_t iters = smp.shape[0]
    cdef Py_ssize_t n = s.shape[0]
    cdef double w[3]
    cdef long idx[3]
    cdef double rot[3][3]
    cdef double t[3]
    cdef long best = -1
    cdef long best_count = 0
    cdef long cnt
    cdef Py_ssize_t it, i
    w[0] = 1.0; w[1] = 1.0; w[2] = 1.0
    with nogil:
        for it in range(iters):
            idx[0] = smp[it, 0]; idx[1] = smp[it, 1]; idx[2] = smp[it, 2]
            if not _kabsch(s, d, w, idx, 3, rot, t):
                continue
            cnt = 0
            for i in range(n):
                if _residual(s, d, i, rot, t) < tau:
                    cnt += 1
                elif cnt + (n - i - 1) <= best_count:
                    # cannot overtake the current best any more
                    break
            if cnt > best_count:
                best_count = cnt
                best = it
    return best, best_count
