"""Per-pixel compositing kernels (numba).

Two payload families are composited per splat:

* linear channels weighted by ``alpha_k T_k`` (color, coverage, depth moments, flow offsets)
* ToF channels weighted by ``alpha_k T_k^2`` (quads, phasor), round-trip transmittance

A ray stops right after the splat that pushes the transmittance below
``T_MIN`` (that splat is still blended, so a fully opaque splat occludes
everything behind it); the remaining transmittance multiplies the
background, so ``sum w_k + T_N = 1`` still holds exactly.

The backward kernel recomputes the front-to-back transmittances for each
pixel into a scratch buffer and then walks back-to-front with the
accumulator recursions, so nothing per-pixel is kept between passes.
"""
import numpy as np
from numba import njit

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4         # stop blending once transmittance falls below this


@njit(cache=True)
def bin_tiles(order, rect, tiles_x, tiles_y):
    """Depth-ordered splat lists per tile.

    ``rect[i] = (tx0, ty0, tx1, ty1)`` is the half-open tile rectangle of splat
    ``order[i]``.  Returns CSR-style ``(offsets, ids)``.
    """
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(order.shape[0]):
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for i in range(order.shape[0]):
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                t = ty * tiles_x + tx
                ids[fill[t]] = order[i]
                fill[t] += 1
    return offsets, ids


@njit(cache=True)
def _power_cutoff(opacity):
    # exponent below which alpha < ALPHA_MIN for sure; saves the exp() call
    out = np.empty(opacity.shape[0])
    for p in range(opacity.shape[0]):
        out[p] = np.log(ALPHA_MIN / max(opacity[p], 1e-300)) - 1e-6
    return out


@njit(cache=True)
def forward(height, width, tile, tiles_x, offsets, ids, mean2d, conic, opacity,
            lin, tof, bg_lin, bg_tof, max_alpha, out_lin, out_tof, out_T):
    n_lin = lin.shape[1]
    n_tof = tof.shape[1]
    tiles_y = (height + tile - 1) // tile
    cutoff = _power_cutoff(opacity)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start, end = offsets[t], offsets[t + 1]
            for y in range(ty * tile, min((ty + 1) * tile, height)):
                py = y + 0.5
                for x in range(tx * tile, min((tx + 1) * tile, width)):
                    px = x + 0.5
                    T = 1.0
                    for s in range(start, end):
                        p = ids[s]
                        dx = px - mean2d[p, 0]
                        dy = py - mean2d[p, 1]
                        power = -0.5 * (conic[p, 0] * dx * dx + conic[p, 2] * dy * dy) - conic[p, 1] * dx * dy
                        if power > 0.0 or power < cutoff[p]:
                            continue
                        alpha = min(max_alpha, opacity[p] * np.exp(power))
                        if alpha < ALPHA_MIN:
                            continue
                        w = alpha * T
                        w2 = w * T
                        for c in range(n_lin):
                            out_lin[y, x, c] += lin[p, c] * w
                        for c in range(n_tof):
                            out_tof[y, x, c] += tof[p, c] * w2
                        T *= 1.0 - alpha
                        if T < T_MIN:
                            break
                    for c in range(n_lin):
                        out_lin[y, x, c] += bg_lin[c] * T
                    for c in range(n_tof):
                        out_tof[y, x, c] += bg_tof[c] * T
                    out_T[y, x] = T


@njit(cache=True)
def backward(height, width, tile, tiles_x, offsets, ids, mean2d, conic, opacity,
             lin, tof, bg_lin, bg_tof, max_alpha, g_lin, g_tof,
             d_mean2d, d_conic, d_opacity, d_lin, d_tof):
    n_lin = lin.shape[1]
    n_tof = tof.shape[1]
    tiles_y = (height + tile - 1) // tile
    cutoff = _power_cutoff(opacity)
    acc_lin = np.empty(n_lin)
    acc_tof = np.empty(n_tof)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start, end = offsets[t], offsets[t + 1]
            m = end - start
            s_id = np.empty(m, dtype=np.int64)
            s_alpha = np.empty(m)
            s_T = np.empty(m)
            s_G = np.empty(m)
            s_dx = np.empty(m)
            s_dy = np.empty(m)
            s_clamped = np.empty(m, dtype=np.bool_)
            for y in range(ty * tile, min((ty + 1) * tile, height)):
                py = y + 0.5
                for x in range(tx * tile, min((tx + 1) * tile, width)):
                    px = x + 0.5
                    # front-to-back: contributors and their transmittance
                    n = 0
                    T = 1.0
                    for s in range(start, end):
                        p = ids[s]
                        dx = px - mean2d[p, 0]
                        dy = py - mean2d[p, 1]
                        power = -0.5 * (conic[p, 0] * dx * dx + conic[p, 2] * dy * dy) - conic[p, 1] * dx * dy
                        if power > 0.0 or power < cutoff[p]:
                            continue
                        G = np.exp(power)
                        raw = opacity[p] * G
                        alpha = min(max_alpha, raw)
                        if alpha < ALPHA_MIN:
                            continue
                        s_id[n] = p
                        s_alpha[n] = alpha
                        s_T[n] = T
                        s_G[n] = G
                        s_dx[n] = dx
                        s_dy[n] = dy
                        s_clamped[n] = raw > max_alpha
                        n += 1
                        T *= 1.0 - alpha
                        if T < T_MIN:
                            break
                    if n == 0:
                        continue
                    # back-to-front accumulators; background acts as the last layer
                    for c in range(n_lin):
                        acc_lin[c] = bg_lin[c]
                    for c in range(n_tof):
                        acc_tof[c] = 0.0
                    behind = 1.0
                    for k in range(n - 1, -1, -1):
                        p = s_id[k]
                        a = s_alpha[k]
                        Tk = s_T[k]
                        Tk2 = Tk * Tk
                        dL_da = 0.0
                        for c in range(n_lin):
                            g = g_lin[y, x, c]
                            dL_da += g * Tk * (lin[p, c] - acc_lin[c])
                            d_lin[p, c] += g * a * Tk
                            acc_lin[c] = a * lin[p, c] + (1.0 - a) * acc_lin[c]
                        for c in range(n_tof):
                            g = g_tof[y, x, c]
                            dL_da += g * (Tk2 * (tof[p, c] + 2.0 * (a - 1.0) * acc_tof[c])
                                          - bg_tof[c] * Tk * behind)
                            d_tof[p, c] += g * a * Tk2
                            acc_tof[c] = a * tof[p, c] + (1.0 - a) * (1.0 - a) * acc_tof[c]
                        behind *= 1.0 - a
                        if s_clamped[k]:
                            continue
                        G = s_G[k]
                        d_opacity[p] += dL_da * G
                        dpower = dL_da * opacity[p] * G
                        dx = s_dx[k]
                        dy = s_dy[k]
                        d_conic[p, 0] += -0.5 * dx * dx * dpower
                        d_conic[p, 1] += -dx * dy * dpower
                        d_conic[p, 2] += -0.5 * dy * dy * dpower
                        d_mean2d[p, 0] += dpower * (conic[p, 0] * dx + conic[p, 1] * dy)
                        d_mean2d[p, 1] += dpower * (conic[p, 1] * dx + conic[p, 2] * dy)
