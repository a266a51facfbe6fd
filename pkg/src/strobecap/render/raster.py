"""Tile-binned front-to-back compositing kernels (forward and reverse).

Per-pixel results do not depend on tiling: a Gaussian contributes to a
pixel iff the pixel lies in its 3-sigma box, and bins preserve depth order.
Each render in a batch is processed serially, so gradient sums are
deterministic regardless of thread count.
"""

import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old; skip it instead of warning at first launch
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16
ALPHA_VALID = 1e-4
N_SCREEN_GRADS = 8  # du, dv, dconic_a, dconic_b, dconic_c, dopacity, dintensity, ddepth


@njit(cache=True)
def _bin(bbox, order, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, np.int64)
    for k in range(order.size):
        g = order[k]
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], np.int64)
    for k in range(order.size):
        g = order[k]
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                t = ty * n_tx + tx
                items[fill[t]] = g
                fill[t] += 1
    return offsets, items


@njit(cache=True)
def _forward_one(u, v, conic, op, inten, depth, bbox, order, H, W, out_i, out_d, out_a):
    n_tx = (W + TILE - 1) // TILE
    n_ty = (H + TILE - 1) // TILE
    offsets, items = _bin(bbox, order, n_tx, n_ty)
    for ty in range(n_ty):
        for tx in range(n_tx):
            t = ty * n_tx + tx
            s, e = offsets[t], offsets[t + 1]
            for py in range(ty * TILE, min((ty + 1) * TILE, H)):
                for px in range(tx * TILE, min((tx + 1) * TILE, W)):
                    T = 1.0
                    C = 0.0
                    D = 0.0
                    for k in range(s, e):
                        g = items[k]
                        if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                            continue
                        dx = px - u[g]
                        dy = py - v[g]
                        power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                        + conic[g, 2] * dy * dy)
                        a = op[g] * np.exp(power)
                        w = a * T
                        C += inten[g] * w
                        D += depth[g] * w
                        T *= 1.0 - a
                    A = 1.0 - T
                    out_i[py, px] = C
                    out_a[py, px] = A
                    out_d[py, px] = D / A if A > ALPHA_VALID else 0.0


@njit(cache=True, parallel=True)
def rasterize_forward(u, v, conic, op, inten, depth, bbox, order, H, W):
    B = u.shape[0]
    out_i = np.zeros((B, H, W))
    out_d = np.zeros((B, H, W))
    out_a = np.zeros((B, H, W))
    for b in prange(B):
        _forward_one(u[b], v[b], conic[b], op[b], inten[b], depth[b], bbox[b], order[b], H, W,
                     out_i[b], out_d[b], out_a[b])
    return out_i, out_d, out_a


@njit(cache=True)
def _backward_one(u, v, conic, op, inten, depth, bbox, order, H, W, up_i, up_d, grads):
    n_tx = (W + TILE - 1) // TILE
    n_ty = (H + TILE - 1) // TILE
    offsets, items = _bin(bbox, order, n_tx, n_ty)
    maxlen = 0
    for t in range(n_tx * n_ty):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    sg = np.empty(maxlen, np.int64)
    sa = np.empty(maxlen)
    se = np.empty(maxlen)
    sT = np.empty(maxlen)
    sdx = np.empty(maxlen)
    sdy = np.empty(maxlen)
    for ty in range(n_ty):
        for tx in range(n_tx):
            t = ty * n_tx + tx
            s, e = offsets[t], offsets[t + 1]
            if s == e:
                continue
            for py in range(ty * TILE, min((ty + 1) * TILE, H)):
                for px in range(tx * TILE, min((tx + 1) * TILE, W)):
                    gi = up_i[py, px]
                    gz = up_d[py, px]
                    if gi == 0.0 and gz == 0.0:
                        continue
                    # replay forward, keeping per-contribution state
                    n = 0
                    T = 1.0
                    D = 0.0
                    for k in range(s, e):
                        g = items[k]
                        if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                            continue
                        dx = px - u[g]
                        dy = py - v[g]
                        ex = np.exp(-0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                            + conic[g, 2] * dy * dy))
                        a = op[g] * ex
                        sg[n] = g
                        sa[n] = a
                        se[n] = ex
                        sT[n] = T
                        sdx[n] = dx
                        sdy[n] = dy
                        n += 1
                        D += depth[g] * a * T
                        T *= 1.0 - a
                    if n == 0:
                        continue
                    A = 1.0 - T
                    gD = 0.0
                    gA = 0.0
                    if A > ALPHA_VALID:
                        gD = gz / A
                        gA = -gz * D / (A * A)
                    # reverse sweep; Gc, Gd: later contributions normalized by transmittance after i
                    Gc = 0.0
                    Gd = 0.0
                    Q = 1.0
                    for j in range(n - 1, -1, -1):
                        g = sg[j]
                        a = sa[j]
                        Ti = sT[j]
                        w = a * Ti
                        grads[g, 6] += gi * w
                        grads[g, 7] += gD * w
                        dLda = gi * Ti * (inten[g] - Gc) + gD * Ti * (depth[g] - Gd) + gA * Ti * Q
                        Gc = inten[g] * a + (1.0 - a) * Gc
                        Gd = depth[g] * a + (1.0 - a) * Gd
                        Q *= 1.0 - a
                        grads[g, 5] += dLda * se[j]
                        dp = dLda * a
                        dx = sdx[j]
                        dy = sdy[j]
                        ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
                        grads[g, 0] += dp * (ca * dx + cb * dy)
                        grads[g, 1] += dp * (cb * dx + cc * dy)
                        grads[g, 2] += -0.5 * dp * dx * dx
                        grads[g, 3] += -dp * dx * dy
                        grads[g, 4] += -0.5 * dp * dy * dy


@njit(cache=True, parallel=True)
def rasterize_backward(u, v, conic, op, inten, depth, bbox, order, H, W, up_i, up_d):
    B, G = u.shape
    grads = np.zeros((B, G, N_SCREEN_GRADS))
    for b in prange(B):
        _backward_one(u[b], v[b], conic[b], op[b], inten[b], depth[b], bbox[b], order[b], H, W,
                      up_i[b], up_d[b], grads[b])
    return grads
