"""numba kernels for tile binning, front-to-back compositing and its adjoint.

Every tile owns a disjoint block of pixels and a disjoint slice of the entry
arrays, so the parallel loops write without races and produce the same bits
for any thread count.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# A splat touches a pixel only inside its 3-sigma ellipse.
SUPPORT_M2 = 9.0


@njit(cache=True)
def bin_tiles(order, px0, px1, py0, py1, tile_size, tiles_x, tiles_y):
    """CSR tile lists. ``order`` holds splat ids front to back; each tile's list keeps that order."""
    n_tiles = tiles_x * tiles_y
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for s in order:
        for ty in range(py0[s] // tile_size, py1[s] // tile_size + 1):
            for tx in range(px0[s] // tile_size, px1[s] // tile_size + 1):
                offsets[ty * tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        offsets[t + 1] += offsets[t]
    cursor = offsets[:-1].copy()
    entries = np.empty(offsets[n_tiles], dtype=np.int64)
    for s in order:
        for ty in range(py0[s] // tile_size, py1[s] // tile_size + 1):
            for tx in range(px0[s] // tile_size, px1[s] // tile_size + 1):
                t = ty * tiles_x + tx
                entries[cursor[t]] = s
                cursor[t] += 1
    return offsets, entries


@njit(cache=True)
def _row_entries(entries, bounds, start, end, py, row):
    """Entries of one tile whose bounding box spans pixel row ``py``, in depth order."""
    n = 0
    for e in range(start, end):
        s = entries[e]
        if bounds[s, 2] <= py <= bounds[s, 3]:
            row[n] = e
            n += 1
    return n


@njit(cache=True)
def _gather(entries, bounds, mean2d, conic, opacity, color, start, end):
    """Copy one tile's splat data into a contiguous (n, 12) block, in depth order."""
    n = end - start
    loc = np.empty((n, 12))
    for k in range(n):
        s = entries[start + k]
        loc[k, 0] = bounds[s, 0]
        loc[k, 1] = bounds[s, 1]
        loc[k, 2] = bounds[s, 2]
        loc[k, 3] = bounds[s, 3]
        loc[k, 4] = mean2d[s, 0]
        loc[k, 5] = mean2d[s, 1]
        loc[k, 6] = conic[s, 0]
        loc[k, 7] = conic[s, 1]
        loc[k, 8] = conic[s, 2]
        loc[k, 9] = opacity[s]
        loc[k, 10] = s
        loc[k, 11] = 0.0
    return loc


@njit(parallel=True, cache=True)
def composite(offsets, entries, bounds, mean2d, conic, opacity, color, background,
              width, height, tile_size, tiles_x, t_min,
              image, final_t, n_contrib, support_sum):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        loc = _gather(entries, bounds, mean2d, conic, opacity, color, start, end)
        y_end = min((ty + 1) * tile_size, height)
        x_end = min((tx + 1) * tile_size, width)
        x_start = tx * tile_size
        nx = x_end - x_start
        trans = np.empty(nx)
        acc = np.empty((nx, 3))
        count = np.empty(nx, dtype=np.int64)
        ids = np.empty(nx, dtype=np.int64)
        done = np.empty(nx, dtype=np.bool_)
        for py in range(ty * tile_size, y_end):
            trans[:] = 1.0
            acc[:] = 0.0
            count[:] = 0
            ids[:] = 0
            done[:] = False
            # splats in depth order; each updates only the pixels of this row inside its box
            for k in range(end - start):
                if not (loc[k, 2] <= py <= loc[k, 3]):
                    continue
                s = entries[start + k]
                xa = max(int(loc[k, 0]), x_start)
                xb = min(int(loc[k, 1]), x_end - 1)
                dy = py - loc[k, 5]
                for px in range(xa, xb + 1):
                    i = px - x_start
                    if done[i]:
                        continue
                    dx = px - loc[k, 4]
                    m2 = loc[k, 6] * dx * dx + 2.0 * loc[k, 7] * dx * dy + loc[k, 8] * dy * dy
                    if m2 > SUPPORT_M2:
                        continue
                    a = loc[k, 9] * np.exp(-0.5 * m2)
                    w = a * trans[i]
                    acc[i, 0] += color[s, 0] * w
                    acc[i, 1] += color[s, 1] * w
                    acc[i, 2] += color[s, 2] * w
                    trans[i] *= 1.0 - a
                    count[i] += 1
                    ids[i] += s + 1
                    if trans[i] < t_min:
                        done[i] = True
            for i in range(nx):
                px = x_start + i
                image[py, px, 0] = acc[i, 0] + trans[i] * background[0]
                image[py, px, 1] = acc[i, 1] + trans[i] * background[1]
                image[py, px, 2] = acc[i, 2] + trans[i] * background[2]
                final_t[py, px] = trans[i]
                n_contrib[py, px] = count[i]
                support_sum[py, px] = ids[i]


@njit(parallel=True, cache=True)
def composite_backward(offsets, entries, bounds, mean2d, conic, opacity, color, background,
                       width, height, tile_size, tiles_x, t_min, upstream,
                       d_color, d_opacity, d_mean2d, d_conic):
    """Per-entry gradients of ``sum(upstream * image)``; entries are reduced to splats by the caller."""
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        n = end - start
        buf_e = np.empty(n, dtype=np.int64)
        buf_a = np.empty(n)
        buf_g = np.empty(n)
        buf_t = np.empty(n)
        buf_dx = np.empty(n)
        buf_dy = np.empty(n)
        row = np.empty(n, dtype=np.int64)
        y_end = min((ty + 1) * tile_size, height)
        x_end = min((tx + 1) * tile_size, width)
        for py in range(ty * tile_size, y_end):
            n_row = _row_entries(entries, bounds, start, end, py, row)
            for px in range(tx * tile_size, x_end):
                up0 = upstream[py, px, 0]
                up1 = upstream[py, px, 1]
                up2 = upstream[py, px, 2]
                if up0 == 0.0 and up1 == 0.0 and up2 == 0.0:
                    continue
                trans = 1.0
                cnt = 0
                for j in range(n_row):
                    e = row[j]
                    s = entries[e]
                    if px < bounds[s, 0] or px > bounds[s, 1]:
                        continue
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    m2 = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if m2 > SUPPORT_M2:
                        continue
                    gval = np.exp(-0.5 * m2)
                    a = opacity[s] * gval
                    buf_e[cnt] = e
                    buf_a[cnt] = a
                    buf_g[cnt] = gval
                    buf_t[cnt] = trans
                    buf_dx[cnt] = dx
                    buf_dy[cnt] = dy
                    cnt += 1
                    trans *= 1.0 - a
                    if trans < t_min:
                        break
                # color seen behind the current splat, before attenuation by it
                r0 = background[0]
                r1 = background[1]
                r2 = background[2]
                for k in range(cnt - 1, -1, -1):
                    e = buf_e[k]
                    s = entries[e]
                    a = buf_a[k]
                    ti = buf_t[k]
                    c0 = color[s, 0]
                    c1 = color[s, 1]
                    c2 = color[s, 2]
                    w = a * ti
                    d_color[e, 0] += up0 * w
                    d_color[e, 1] += up1 * w
                    d_color[e, 2] += up2 * w
                    d_a = ti * (up0 * (c0 - r0) + up1 * (c1 - r1) + up2 * (c2 - r2))
                    r0 = c0 * a + (1.0 - a) * r0
                    r1 = c1 * a + (1.0 - a) * r1
                    r2 = c2 * a + (1.0 - a) * r2
                    gval = buf_g[k]
                    d_opacity[e] += d_a * gval
                    d_m2 = -0.5 * d_a * opacity[s] * gval
                    dx = buf_dx[k]
                    dy = buf_dy[k]
                    d_conic[e, 0] += d_m2 * dx * dx
                    d_conic[e, 1] += d_m2 * 2.0 * dx * dy
                    d_conic[e, 2] += d_m2 * dy * dy
                    d_mean2d[e, 0] -= d_m2 * 2.0 * (conic[s, 0] * dx + conic[s, 1] * dy)
                    d_mean2d[e, 1] -= d_m2 * 2.0 * (conic[s, 1] * dx + conic[s, 2] * dy)
