# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for the contracts."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, fabs, INFINITY

from .errors import NotPositiveDefinite

cnp.import_array()

cdef double NORM_GUARD = 1e-12
cdef double EPS = 2.220446049250313e-16


def contour_mask(pixels_in, int threshold):
    cdef const unsigned char[:, ::1] pixels = np.ascontiguousarray(pixels_in, dtype=np.uint8)
    cdef Py_ssize_t h = pixels.shape[0], w = pixels.shape[1]
    # ink flags with a one-pixel background border
    pad_arr = np.zeros((h + 2, w + 2), dtype=np.uint8)
    cdef unsigned char[:, ::1] ink = pad_arr
    cdef Py_ssize_t y, x
    for y in range(h):
        for x in range(w):
            ink[y + 1, x + 1] = pixels[y, x] < threshold
    out = np.zeros((h, w), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] res = out
    for y in range(1, h + 1):
        for x in range(1, w + 1):
            # branch-free: ink and not fully surrounded by ink
            res[y - 1, x - 1] = ink[y, x] & (1 - (ink[y - 1, x - 1] & ink[y - 1, x] & ink[y - 1, x + 1]
                                                  & ink[y, x - 1] & ink[y, x + 1]
                                                  & ink[y + 1, x - 1] & ink[y + 1, x] & ink[y + 1, x + 1]))
    return out


def jacobi_eigh(a_in, const long[:, :, :] schedule, int max_sweeps):
    a_arr = np.array(a_in, dtype=np.float64, copy=True)
    cdef double[:, :] a = a_arr
    cdef Py_ssize_t n = a.shape[0]
    v_arr = np.eye(n)
    cdef double[:, :] v = v_arr
    if n < 2:
        return np.diag(a_arr).copy(), v_arr, 0
    cdef Py_ssize_t i, j, r, pi, p, q
    cdef Py_ssize_t rounds = schedule.shape[0], npairs = schedule.shape[1]
    cdef double frob = 0.0, floor, apq, app, aqq, tau, t, c, s, x1, x2
    cdef int sweeps = 0, sweep
    cdef long rotated
    for i in range(n):
        for j in range(n):
            frob += a[i, j] * a[i, j]
    frob = sqrt(frob)
    floor = 1e-300 if frob == 0.0 else frob * 1e-300
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        rotated = 0
        for r in range(rounds):
            for pi in range(npairs):
                p = schedule[r, pi, 0]
                q = schedule[r, pi, 1]
                apq = a[p, q]
                app = a[p, p]
                aqq = a[q, q]
                if not (fabs(apq) > EPS * sqrt(fabs(app * aqq)) and fabs(apq) > floor):
                    continue
                rotated += 1
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    x1 = a[i, p]
                    x2 = a[i, q]
                    a[i, p] = c * x1 - s * x2
                    a[i, q] = s * x1 + c * x2
                for i in range(n):
                    x1 = a[p, i]
                    x2 = a[q, i]
                    a[p, i] = c * x1 - s * x2
                    a[q, i] = s * x1 + c * x2
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    x1 = v[i, p]
                    x2 = v[i, q]
                    v[i, p] = c * x1 - s * x2
                    v[i, q] = s * x1 + c * x2
        if rotated == 0:
            break
    return np.diag(a_arr).copy(), v_arr, sweeps


def cholesky_solve(a_in, b_in):
    cdef double[:, :] a = np.ascontiguousarray(a_in, dtype=np.float64)
    cdef double[:] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], i, j, k
    low_arr = np.zeros((n, n))
    cdef double[:, :] low = low_arr
    cdef double acc, d
    for j in range(n):
        d = a[j, j]
        for k in range(j):
            d -= low[j, k] * low[j, k]
        if not d > 0.0:
            raise NotPositiveDefinite(f"pivot {j} is {d!r}")
        low[j, j] = sqrt(d)
        for i in range(j + 1, n):
            acc = a[i, j]
            for k in range(j):
                acc -= low[i, k] * low[j, k]
            low[i, j] = acc / low[j, j]
    y_arr = np.zeros(n)
    x_arr = np.zeros(n)
    cdef double[:] y = y_arr
    cdef double[:] x = x_arr
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= low[i, k] * y[k]
        y[i] = acc / low[i, i]
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= low[k, i] * x[k]
        x[i] = acc / low[i, i]
    return x_arr


def netvlad_forward(centers_in, weights_in, biases_in, x_in):
    cdef double[:, :] c = np.ascontiguousarray(centers_in, dtype=np.float64)
    cdef double[:, :] w = np.ascontiguousarray(weights_in, dtype=np.float64)
    cdef double[:] b = np.ascontiguousarray(biases_in, dtype=np.float64)
    cdef double[:, :] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t bsz = x.shape[0], K = c.shape[0], D = c.shape[1]
    cdef Py_ssize_t n, k, j
    emb_arr = np.zeros((bsz, K * D))
    assign_arr = np.zeros((bsz, K))
    norms_arr = np.zeros(bsz)
    cdef double[:, :] emb = emb_arr
    cdef double[:, :] assign = assign_arr
    cdef double[:] norms = norms_arr
    cdef double z, zmax, total, val, sq, scale
    for n in range(bsz):
        zmax = -INFINITY
        for k in range(K):
            z = b[k]
            for j in range(D):
                z += w[k, j] * x[n, j]
            assign[n, k] = z
            if z > zmax:
                zmax = z
        total = 0.0
        for k in range(K):
            assign[n, k] = exp(assign[n, k] - zmax)
            total += assign[n, k]
        sq = 0.0
        for k in range(K):
            assign[n, k] /= total
            for j in range(D):
                val = assign[n, k] * (x[n, j] - c[k, j])
                emb[n, k * D + j] = val
                sq += val * val
        norms[n] = sqrt(sq)
        if norms[n] >= NORM_GUARD:
            scale = norms[n]
            for j in range(K * D):
                emb[n, j] /= scale
    return emb_arr, assign_arr, norms_arr


def netvlad_backward(centers_in, weights_in, biases_in, x_in, assign_in, emb_in, norms_in, upstream_in):
    cdef double[:, :] c = np.ascontiguousarray(centers_in, dtype=np.float64)
    cdef double[:, :] w = np.ascontiguousarray(weights_in, dtype=np.float64)
    cdef double[:, :] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :] assign = np.ascontiguousarray(assign_in, dtype=np.float64)
    cdef double[:, :] emb = np.ascontiguousarray(emb_in, dtype=np.float64)
    cdef double[:] norms = np.ascontiguousarray(norms_in, dtype=np.float64)
    cdef Py_ssize_t bsz = x.shape[0], K = c.shape[0], D = c.shape[1]
    cdef double[:, :] g = np.ascontiguousarray(upstream_in, dtype=np.float64).reshape(bsz, K * D)
    gx_arr = np.zeros((bsz, D))
    gc_arr = np.zeros((K, D))
    gw_arr = np.zeros((K, D))
    gb_arr = np.zeros(K)
    ga_arr = np.zeros(K)
    gv_arr = np.zeros(K * D)
    cdef double[:, :] gx = gx_arr
    cdef double[:, :] gc = gc_arr
    cdef double[:, :] gw = gw_arr
    cdef double[:] gb = gb_arr
    cdef double[:] ga = ga_arr
    cdef double[:] gv = gv_arr
    cdef Py_ssize_t n, k, j
    cdef double proj, mean_ga, gz, r, a
    cdef bint guarded
    for n in range(bsz):
        guarded = norms[n] < NORM_GUARD
        proj = 0.0
        if not guarded:
            for j in range(K * D):
                proj += emb[n, j] * g[n, j]
        for j in range(K * D):
            if guarded:
                gv[j] = g[n, j]
            else:
                gv[j] = (g[n, j] - emb[n, j] * proj) / norms[n]
        mean_ga = 0.0
        for k in range(K):
            a = assign[n, k]
            ga[k] = 0.0
            for j in range(D):
                r = x[n, j] - c[k, j]
                ga[k] += gv[k * D + j] * r
                gc[k, j] -= a * gv[k * D + j]
                gx[n, j] += a * gv[k * D + j]
            mean_ga += a * ga[k]
        for k in range(K):
            gz = assign[n, k] * (ga[k] - mean_ga)
            gb[k] += gz
            for j in range(D):
                gw[k, j] += gz * x[n, j]
                gx[n, j] += gz * w[k, j]
    return gx_arr, gc_arr, gw_arr, gb_arr


def mine_triplets(dist_in, labels_in, double margin):
    cdef double[:, :] dist = np.ascontiguousarray(dist_in, dtype=np.float64)
    cdef long[:] lab = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef Py_ssize_t n = lab.shape[0], ai, pi, ni, band_best, fb_best
    cdef double dap, dan, band_d, fb_d
    out = []
    for ai in range(n):
        for pi in range(n):
            if pi == ai or lab[pi] != lab[ai]:
                continue
            dap = dist[ai, pi]
            band_best = -1
            fb_best = -1
            band_d = INFINITY
            fb_d = INFINITY
            for ni in range(n):
                if lab[ni] == lab[ai]:
                    continue
                dan = dist[ai, ni]
                if dan < dap + margin:
                    if dan > dap and dan < band_d:
                        band_d = dan
                        band_best = ni
                    if dan < fb_d:
                        fb_d = dan
                        fb_best = ni
            if band_best >= 0:
                out.append((ai, pi, band_best))
            elif fb_best >= 0:
                out.append((ai, pi, fb_best))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.array(out, dtype=np.int64)
