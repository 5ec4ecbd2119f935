"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one for one and are used whenever the compiled
extension is unavailable. Signatures and return conventions are identical.
"""

import numpy as np

from .errors import NotPositiveDefinite

NORM_GUARD = 1e-12
_EPS = np.finfo(np.float64).eps


def contour_mask(pixels, threshold):
    ink = pixels < threshold
    h, w = ink.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = ink
    interior = np.ones_like(ink)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            interior &= padded[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
    return ink & ~interior


def jacobi_eigh(a, schedule, max_sweeps):
    """Cyclic Jacobi on a symmetric matrix using a round-robin pair schedule.

    ``schedule`` has shape (rounds, pairs, 2); each round holds disjoint pairs,
    so rotating them together equals rotating them one after another.
    Returns unsorted eigenvalues, eigenvectors (columns) and the sweep count.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v, 0
    frob = np.sqrt(np.sum(a * a))
    floor = 1e-300 if frob == 0.0 else frob * 1e-300
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = 0
        for rnd in schedule:
            p = rnd[:, 0]
            q = rnd[:, 1]
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = (np.abs(apq) > _EPS * np.sqrt(np.abs(app * aqq))) & (np.abs(apq) > floor)
            if not active.any():
                continue
            p = p[active]
            q = q[active]
            apq = apq[active]
            app = app[active]
            aqq = aqq[active]
            rotated += p.size
            tau = (aqq - app) / (2.0 * apq)
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cp = a[:, p].copy()
            cq = a[:, q].copy()
            a[:, p] = c * cp - s * cq
            a[:, q] = s * cp + c * cq
            rp = a[p, :].copy()
            rq = a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = v[:, p].copy()
            vq = v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if rotated == 0:
            break
    return np.diag(a).copy(), v, sweeps


def cholesky_solve(a, b):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    low = np.zeros((n, n))
    for j in range(n):
        row = low[j, :j]
        d = a[j, j] - row @ row
        if not d > 0.0:
            raise NotPositiveDefinite(f"pivot {j} is {d!r}")
        ljj = np.sqrt(d)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ row) / ljj
    y = np.zeros(n)
    for i in range(n):
        y[i] = (b[i] - low[i, :i] @ y[:i]) / low[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - low[i + 1:, i] @ x[i + 1:]) / low[i, i]
    return x


def netvlad_forward(centers, weights, biases, x):
    """Batched NetVLAD embedding.

    Returns (normalized embeddings B x K*D, assignments B x K, raw norms B).
    """
    logits = x @ weights.T + biases
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    assign = e / e.sum(axis=1, keepdims=True)
    resid = x[:, None, :] - centers[None, :, :]
    raw = (assign[:, :, None] * resid).reshape(x.shape[0], -1)
    norms = np.sqrt(np.sum(raw * raw, axis=1))
    scale = np.where(norms < NORM_GUARD, 1.0, norms)
    return raw / scale[:, None], assign, norms


def netvlad_backward(centers, weights, biases, x, assign, emb, norms, upstream):
    """Gradients of sum_b <upstream_b, emb_b> w.r.t. x (per row) and summed params."""
    bsz = x.shape[0]
    k, d = centers.shape
    g = upstream.reshape(bsz, k * d)
    proj = np.sum(emb * g, axis=1)
    scale = np.where(norms < NORM_GUARD, 1.0, norms)
    guarded = norms < NORM_GUARD
    gv = np.where(guarded[:, None], g, (g - emb * proj[:, None]) / scale[:, None])
    gv = gv.reshape(bsz, k, d)
    resid = x[:, None, :] - centers[None, :, :]
    ga = np.sum(gv * resid, axis=2)
    weighted = assign[:, :, None] * gv
    grad_c = -weighted.sum(axis=0)
    gz = assign * (ga - np.sum(assign * ga, axis=1, keepdims=True))
    grad_w = gz.T @ x
    grad_b = gz.sum(axis=0)
    grad_x = weighted.sum(axis=1) + gz @ weights
    return grad_x, grad_c, grad_w, grad_b


def mine_triplets(dist, labels, margin):
    """Semi-hard triplets with a positive-loss fallback; see ``training.mine_semi_hard``."""
    labels = np.asarray(labels)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    d_ap = dist[:, :, None]
    d_an = dist[:, None, :]
    valid = pos[:, :, None] & neg[:, None, :]
    band = valid & (d_an > d_ap) & (d_an < d_ap + margin)
    fallback = valid & (d_an < d_ap + margin)
    inf = np.inf
    band_d = np.where(band, d_an, inf)
    fb_d = np.where(fallback, d_an, inf)
    band_best = np.argmin(band_d, axis=2)
    fb_best = np.argmin(fb_d, axis=2)
    has_band = band.any(axis=2)
    has_fb = fallback.any(axis=2)
    chosen = np.where(has_band, band_best, fb_best)
    keep = pos & (has_band | has_fb)
    a_idx, p_idx = np.nonzero(keep)
    return np.stack([a_idx, p_idx, chosen[a_idx, p_idx]], axis=1).astype(np.int64)
