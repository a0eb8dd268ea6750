"""Numba kernels for tile-based and brute-force splat compositing.

All kernels are single-threaded sequential loops: pixel results and gradient
accumulations are bitwise reproducible regardless of how many threads the
host process was given. Splat arrays arrive depth-sorted; per-pixel
compositing walks them front to back with the shared early-exit rule
(stop once transmittance drops below ``t_min``).
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def tile_bins(means, sigmas, cutoff, W, H, tile):
    """CSR binning of splats into the tile grid, preserving input (depth) order.

    Returns (tile_ptr [T+1], tile_ids [E]) where T = tiles_x * tiles_y.
    """
    M = means.shape[0]
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    rects = np.empty((M, 4), dtype=np.int64)
    for i in range(M):
        r = cutoff * sigmas[i]
        x0 = int(math.floor(means[i, 0] - r))
        x1 = int(math.ceil(means[i, 0] + r))
        y0 = int(math.floor(means[i, 1] - r))
        y1 = int(math.ceil(means[i, 1] + r))
        if x1 < 0 or y1 < 0 or x0 > W - 1 or y0 > H - 1:
            rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3] = 1, 0, 1, 0
            continue
        tx0 = max(x0, 0) // tile
        tx1 = min(x1, W - 1) // tile
        ty0 = max(y0, 0) // tile
        ty1 = min(y1, H - 1) // tile
        rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3] = tx0, tx1, ty0, ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx] += 1
    tile_ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        tile_ptr[t + 1] = tile_ptr[t] + counts[t]
    cursor = tile_ptr[:-1].copy()
    tile_ids = np.empty(tile_ptr[-1], dtype=np.int64)
    for i in range(M):
        tx0, tx1, ty0, ty1 = rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3]
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                tile_ids[cursor[t]] = i
                cursor[t] += 1
    return tile_ptr, tile_ids


@njit(cache=True)
def composite_tiled(means, sigmas, colors, tile_ptr, tile_ids, W, H, tile,
                    background, alpha_max, t_min, cutoff,
                    img, alpha_out, ncontrib):
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    cutoff_sq = cutoff * cutoff
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            lo = tile_ptr[ty * tiles_x + tx]
            hi = tile_ptr[ty * tiles_x + tx + 1]
            for py in range(ty * tile, min((ty + 1) * tile, H)):
                for px in range(tx * tile, min((tx + 1) * tile, W)):
                    T = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    n = 0
                    for k in range(lo, hi):
                        if T < t_min:
                            break
                        i = tile_ids[k]
                        dx = px - means[i, 0]
                        dy = py - means[i, 1]
                        s2 = sigmas[i] * sigmas[i]
                        d2 = dx * dx + dy * dy
                        if d2 > cutoff_sq * s2:
                            continue
                        a = math.exp(-d2 / (2.0 * s2))
                        if a > alpha_max:
                            a = alpha_max
                        w = a * T
                        r += w * colors[i, 0]
                        g += w * colors[i, 1]
                        b += w * colors[i, 2]
                        T *= 1.0 - a
                        n += 1
                    img[py, px, 0] = r + T * background[0]
                    img[py, px, 1] = g + T * background[1]
                    img[py, px, 2] = b + T * background[2]
                    alpha_out[py, px] = 1.0 - T
                    ncontrib[py, px] = n


@njit(cache=True)
def composite_naive(means, sigmas, colors, W, H, background,
                    alpha_max, t_min, cutoff, img, alpha_out):
    """Reference renderer: every pixel walks every splat (no tiling)."""
    M = means.shape[0]
    cutoff_sq = cutoff * cutoff
    for py in range(H):
        for px in range(W):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for i in range(M):
                if T < t_min:
                    break
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                s2 = sigmas[i] * sigmas[i]
                d2 = dx * dx + dy * dy
                if d2 > cutoff_sq * s2:
                    continue
                a = math.exp(-d2 / (2.0 * s2))
                if a > alpha_max:
                    a = alpha_max
                w = a * T
                r += w * colors[i, 0]
                g += w * colors[i, 1]
                b += w * colors[i, 2]
                T *= 1.0 - a
            img[py, px, 0] = r + T * background[0]
            img[py, px, 1] = g + T * background[1]
            img[py, px, 2] = b + T * background[2]
            alpha_out[py, px] = 1.0 - T


@njit(cache=True)
def fill_records(means, sigmas, tile_ptr, tile_ids, W, H, tile,
                 alpha_max, t_min, cutoff, rec_ptr,
                 rec_point, rec_alpha, rec_T):
    """Second pass: store (splat, alpha, transmittance-before) per contributor."""
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    cutoff_sq = cutoff * cutoff
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            lo = tile_ptr[ty * tiles_x + tx]
            hi = tile_ptr[ty * tiles_x + tx + 1]
            for py in range(ty * tile, min((ty + 1) * tile, H)):
                for px in range(tx * tile, min((tx + 1) * tile, W)):
                    cur = rec_ptr[py * W + px]
                    T = 1.0
                    for k in range(lo, hi):
                        if T < t_min:
                            break
                        i = tile_ids[k]
                        dx = px - means[i, 0]
                        dy = py - means[i, 1]
                        s2 = sigmas[i] * sigmas[i]
                        d2 = dx * dx + dy * dy
                        if d2 > cutoff_sq * s2:
                            continue
                        a = math.exp(-d2 / (2.0 * s2))
                        if a > alpha_max:
                            a = alpha_max
                        rec_point[cur] = i
                        rec_alpha[cur] = a
                        rec_T[cur] = T
                        cur += 1
                        T *= 1.0 - a


@njit(cache=True)
def composite_backward(means, sigmas, colors, background,
                       rec_ptr, rec_point, rec_alpha, rec_T,
                       dL_dimg, dL_dalpha, W, H, alpha_max,
                       g_mean, g_sigma, g_color):
    """Exact reverse of the compositing recurrence using stored transmittances.

    Per pixel, walking contributors back to front with S = the composited
    color behind the current splat (background included):
      dL/d c_i = a_i T_i dL/dC
      dL/d a_i = dL/dC . (T_i c_i - S_i / (1 - a_i)) + dL/dA T_N / (1 - a_i)
    then chains through a = min(alpha_max, exp(-d^2 / 2 sigma^2)); the clamp
    zeroes the mean/scale path.
    """
    for py in range(H):
        for px in range(W):
            p = py * W + px
            lo = rec_ptr[p]
            hi = rec_ptr[p + 1]
            if hi == lo:
                continue
            dC0 = dL_dimg[py, px, 0]
            dC1 = dL_dimg[py, px, 1]
            dC2 = dL_dimg[py, px, 2]
            dA = dL_dalpha[py, px]
            T_final = rec_T[hi - 1] * (1.0 - rec_alpha[hi - 1])
            S0 = T_final * background[0]
            S1 = T_final * background[1]
            S2 = T_final * background[2]
            for k in range(hi - 1, lo - 1, -1):
                i = rec_point[k]
                a = rec_alpha[k]
                T = rec_T[k]
                w = a * T
                g_color[i, 0] += w * dC0
                g_color[i, 1] += w * dC1
                g_color[i, 2] += w * dC2
                one_m = 1.0 - a
                dL_da = (dC0 * (T * colors[i, 0] - S0 / one_m)
                         + dC1 * (T * colors[i, 1] - S1 / one_m)
                         + dC2 * (T * colors[i, 2] - S2 / one_m)
                         + dA * T_final / one_m)
                if a < alpha_max:  # the clamp is flat in mean and scale
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    s = sigmas[i]
                    s2 = s * s
                    d2 = dx * dx + dy * dy
                    common = dL_da * a
                    g_mean[i, 0] += common * dx / s2
                    g_mean[i, 1] += common * dy / s2
                    g_sigma[i] += common * d2 / (s2 * s)
                S0 += w * colors[i, 0]
                S1 += w * colors[i, 1]
                S2 += w * colors[i, 2]
