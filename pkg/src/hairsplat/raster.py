"""Tile binning and front-to-back alpha compositing kernels (numba).

All kernels operate on already-projected primitives: screen means, conics
(inverse screen covariances stored as (a, b, c) for [[a, b], [b, c]]),
opacities and a dense per-primitive feature matrix.  Tiles are processed
independently; the backward pass writes one accumulator row per
(tile, primitive) pair and a serial reduction sums them in pair order, so
results do not depend on the thread count.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in __import__("os").environ:
    nb.config.THREADING_LAYER = "omp"

ALPHA_MAX = 0.99
T_MIN = 1e-4
ALPHA_MIN = 1.0 / 255.0

# accumulator layout for a (tile, primitive) pair in the backward pass
ACC_MX, ACC_MY, ACC_A, ACC_B, ACC_C, ACC_O = 0, 1, 2, 3, 4, 5
ACC_FEAT = 6


@nb.njit(cache=True)
def _box_min_quadratic(a, b, c, x0, x1, y0, y1):
    """min over the box [x0,x1]x[y0,y1] of a x^2 + 2 b x y + c y^2 (a, c > 0)."""
    if x0 <= 0.0 <= x1 and y0 <= 0.0 <= y1:
        return 0.0
    best = np.inf
    # edges x = const
    for x in (x0, x1):
        y = -b * x / c
        if y < y0:
            y = y0
        elif y > y1:
            y = y1
        v = a * x * x + 2.0 * b * x * y + c * y * y
        if v < best:
            best = v
    for y in (y0, y1):
        x = -b * y / a
        if x < x0:
            x = x0
        elif x > x1:
            x = x1
        v = a * x * x + 2.0 * b * x * y + c * y * y
        if v < best:
            best = v
    return best


@nb.njit(cache=True)
def _tile_rect(mx, my, radius, tile, n_tx, n_ty):
    tx0 = int(math.floor((mx - radius) / tile))
    tx1 = int(math.floor((mx + radius) / tile))
    ty0 = int(math.floor((my - radius) / tile))
    ty1 = int(math.floor((my + radius) / tile))
    return max(tx0, 0), min(tx1, n_tx - 1), max(ty0, 0), min(ty1, n_ty - 1)


@nb.njit(cache=True)
def bin_primitives(order, means2d, conics, radii, visible, width, height, tile, sigma_cut):
    """Per-tile primitive lists, each in the order given by ``order``.

    A primitive lands in a tile when its ``sigma_cut``-sigma screen ellipse
    touches the tile's pixel-center rectangle.

    Returns ``(tile_ranges, ids)``: tile ``k`` owns ``ids[tile_ranges[k, 0]:tile_ranges[k, 1]]``.
    """
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    cut2 = sigma_cut * sigma_cut
    counts = np.zeros(n_tiles, np.int64)
    for oi in range(order.shape[0]):
        g = order[oi]
        if not visible[g]:
            continue
        mx, my = means2d[g, 0], means2d[g, 1]
        tx0, tx1, ty0, ty1 = _tile_rect(mx, my, radii[g], tile, n_tx, n_ty)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                x0 = tx * tile - mx
                x1 = min((tx + 1) * tile, width) - 1 - mx
                y0 = ty * tile - my
                y1 = min((ty + 1) * tile, height) - 1 - my
                if _box_min_quadratic(conics[g, 0], conics[g, 1], conics[g, 2], x0, x1, y0, y1) <= cut2:
                    counts[ty * n_tx + tx] += 1
    ranges = np.zeros((n_tiles, 2), np.int64)
    total = 0
    for k in range(n_tiles):
        ranges[k, 0] = total
        total += counts[k]
        ranges[k, 1] = total
    ids = np.empty(total, np.int32)
    fill = ranges[:, 0].copy()
    for oi in range(order.shape[0]):
        g = order[oi]
        if not visible[g]:
            continue
        mx, my = means2d[g, 0], means2d[g, 1]
        tx0, tx1, ty0, ty1 = _tile_rect(mx, my, radii[g], tile, n_tx, n_ty)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                x0 = tx * tile - mx
                x1 = min((tx + 1) * tile, width) - 1 - mx
                y0 = ty * tile - my
                y1 = min((ty + 1) * tile, height) - 1 - my
                if _box_min_quadratic(conics[g, 0], conics[g, 1], conics[g, 2], x0, x1, y0, y1) <= cut2:
                    k = ty * n_tx + tx
                    ids[fill[k]] = g
                    fill[k] += 1
    return ranges, ids


@nb.njit(parallel=True, cache=True)
def composite_forward(tile_ranges, ids, means2d, conics, opac, feats, bg, width, height, tile, alpha_min):
    n_tx = (width + tile - 1) // tile
    n_tiles = tile_ranges.shape[0]
    n_ch = feats.shape[1]
    out = np.empty((height, width, n_ch))
    final_T = np.empty((height, width))
    n_contrib = np.zeros((height, width), np.int32)
    for k in nb.prange(n_tiles):
        tx = k % n_tx
        ty = k // n_tx
        start, end = tile_ranges[k, 0], tile_ranges[k, 1]
        acc = np.empty(n_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                acc[:] = 0.0
                T = 1.0
                last = 0
                for j in range(start, end):
                    g = ids[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opac[g] * math.exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < alpha_min:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    for c in range(n_ch):
                        acc[c] += feats[g, c] * w
                    T = test_T
                    last = j - start + 1
                for c in range(n_ch):
                    out[py, px, c] = acc[c] + T * bg[c]
                final_T[py, px] = T
                n_contrib[py, px] = last
    return out, final_T, n_contrib


@nb.njit(parallel=True, cache=True)
def composite_backward(tile_ranges, ids, means2d, conics, opac, feats, bg, width, height, tile,
                       alpha_min, final_T, n_contrib, grad_out):
    """Adjoint of :func:`composite_forward` (ordering treated as constant).

    Returns per-pair accumulators of shape (len(ids), 6 + n_ch) with columns
    d/d mean2d (2), d/d conic (a, b, c), d/d opacity, d/d features.
    """
    n_tx = (width + tile - 1) // tile
    n_tiles = tile_ranges.shape[0]
    n_ch = feats.shape[1]
    acc = np.zeros((ids.shape[0], ACC_FEAT + n_ch))
    for k in nb.prange(n_tiles):
        tx = k % n_tx
        ty = k // n_tx
        start = tile_ranges[k, 0]
        accum = np.empty(n_ch)
        last_feat = np.empty(n_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T_final = final_T[py, px]
                T = T_final
                accum[:] = 0.0
                last_feat[:] = 0.0
                last_alpha = 0.0
                bg_dot = 0.0
                for c in range(n_ch):
                    bg_dot += bg[c] * grad_out[py, px, c]
                for j in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = ids[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    raw = opac[g] * G
                    alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                    if alpha < alpha_min:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    dl_dalpha = 0.0
                    for c in range(n_ch):
                        acc[j, ACC_FEAT + c] += w * grad_out[py, px, c]
                        accum[c] = last_alpha * last_feat[c] + (1.0 - last_alpha) * accum[c]
                        last_feat[c] = feats[g, c]
                        dl_dalpha += (feats[g, c] - accum[c]) * grad_out[py, px, c]
                    last_alpha = alpha
                    dl_dalpha *= T
                    dl_dalpha += -T_final / (1.0 - alpha) * bg_dot
                    if raw >= ALPHA_MAX:
                        continue
                    acc[j, ACC_O] += G * dl_dalpha
                    dl_dG = opac[g] * dl_dalpha
                    gpow = G * dl_dG
                    # d power / d mean = (a dx + b dy, b dx + c dy)
                    acc[j, ACC_MX] += gpow * (ca * dx + cb * dy)
                    acc[j, ACC_MY] += gpow * (cb * dx + cc * dy)
                    acc[j, ACC_A] += -0.5 * gpow * dx * dx
                    acc[j, ACC_B] += -gpow * dx * dy
                    acc[j, ACC_C] += -0.5 * gpow * dy * dy
    return acc


@nb.njit(cache=True)
def reduce_pairs(ids, acc, n):
    out = np.zeros((n, acc.shape[1]))
    for j in range(ids.shape[0]):
        g = ids[j]
        for c in range(acc.shape[1]):
            out[g, c] += acc[j, c]
    return out


def set_threads(n: int | None) -> None:
    if n:
        nb.set_num_threads(int(n))
