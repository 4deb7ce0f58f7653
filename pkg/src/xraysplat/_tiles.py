"""Tile binning and the per-tile compute kernels.

Kernels are duplicated once per overlapped tile, the (tile, kernel) pairs are
sorted by tile with kernel order preserved, and each tile then walks its own
contiguous slice. Forward passes write only to pixels/voxels owned by the
tile, so tiles run in parallel without synchronisation. Backward passes write
one gradient record per pair; records are reduced per kernel afterwards in
pair order, which keeps results bit-identical for any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import prange

# TBB builds on some hosts are too old for numba; prefer OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass
class TileBins:
    grid_shape: tuple  # tiles per axis, x first
    offsets: np.ndarray  # (n_tiles + 1,) int64
    kernel_ids: np.ndarray  # (n_pairs,) int64, sorted by tile then kernel

    @property
    def n_pairs(self) -> int:
        return int(self.kernel_ids.shape[0])

    def reduce(self, pair_values: np.ndarray, n_kernels: int) -> np.ndarray:
        """Sum per-pair records into per-kernel totals in pair order."""
        out = np.zeros((n_kernels,) + pair_values.shape[1:])
        np.add.at(out, self.kernel_ids, pair_values)
        return out


def bin_kernels(lo: np.ndarray, hi: np.ndarray, grid_shape) -> TileBins:
    """Duplicate kernels over the inclusive tile-index boxes ``[lo, hi]``.

    Boxes must already be clipped to the grid; rows with ``hi < lo`` on any
    axis are treated as culled.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    grid_shape = tuple(int(g) for g in grid_shape)
    n_tiles = int(np.prod(grid_shape))
    ext = np.maximum(hi - lo + 1, 0)
    counts = np.prod(ext, axis=1) if ext.size else np.zeros(0, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return TileBins(grid_shape, np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    kid = np.repeat(np.arange(lo.shape[0], dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    tile = np.zeros(total, dtype=np.int64)
    stride = 1
    for d, n in enumerate(grid_shape):
        e = ext[kid, d]
        tile += (lo[kid, d] + local % e) * stride
        local //= e
        stride *= n
    order = np.argsort(tile, kind="stable")
    tile = tile[order]
    offsets = np.searchsorted(tile, np.arange(n_tiles + 1, dtype=np.int64)).astype(np.int64)
    return TileBins(grid_shape, offsets, np.ascontiguousarray(kid[order]))


# 2D: splatting projected Gaussians onto the detector


# Along a pixel row the exponent is quadratic in u, so consecutive Gaussian
# values differ by a ratio that itself changes by the constant factor
# exp(-a). Rows are walked outward from the pixel nearest the row's peak,
# where every ratio is <= 1; this replaces all but three exponentials per
# row with two multiplications per pixel. Values below TINY end the walk.
TINY = 1e-200


@numba.njit(inline="always")
def _row_start(mx, my, a, b, c, v, u0, u1):
    """Pixel nearest the row peak (clamped to [u0, u1)), its dx, dy and Gaussian value."""
    dy = v + 0.5 - my
    us = mx - 0.5 - b * dy / a
    us = min(max(us, u0 - 1.0), u1 + 1.0)
    x0 = int(np.floor(us + 0.5))
    x0 = min(max(x0, u0), u1 - 1)
    dx = x0 + 0.5 - mx
    g0 = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
    return x0, dx, dy, g0


@numba.njit(parallel=True, cache=True)
def raster_forward(offsets, kid, mx, my, ca, cb, cc, amp, height, width, tile, n_tx, out):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        j0 = offsets[t]
        j1 = offsets[t + 1]
        if j1 == j0:
            continue
        ty = t // n_tx
        tx = t - ty * n_tx
        u0 = tx * tile
        v0 = ty * tile
        u1 = min(u0 + tile, width)
        v1 = min(v0 + tile, height)
        # kernel-major over a tile-local buffer; each pixel still sums in pair order
        buf = np.zeros((v1 - v0, u1 - u0))
        for j in range(j0, j1):
            k = kid[j]
            a = ca[k]
            b = cb[k]
            K = np.exp(-a)
            A = amp[k]
            for v in range(v0, v1):
                x0, dx, dy, g0 = _row_start(mx[k], my[k], a, b, cc[k], v, u0, u1)
                if g0 < TINY:
                    continue
                row = v - v0
                buf[row, x0 - u0] += A * g0
                if x0 + 1 < u1:
                    r = np.exp(-0.5 * (a * (2.0 * dx + 1.0) + 2.0 * b * dy))
                    g = g0 * r
                    for u in range(x0 + 1, u1):
                        if g < TINY:
                            break
                        buf[row, u - u0] += A * g
                        r *= K
                        g *= r
                if x0 > u0:
                    r = np.exp(-0.5 * (a * (1.0 - 2.0 * dx) - 2.0 * b * dy))
                    g = g0 * r
                    for u in range(x0 - 1, u0 - 1, -1):
                        if g < TINY:
                            break
                        buf[row, u - u0] += A * g
                        r *= K
                        g *= r
        for v in range(v0, v1):
            for u in range(u0, u1):
                out[v, u] = buf[v - v0, u - u0]


@numba.njit(parallel=True, cache=True)
def raster_backward(offsets, kid, mx, my, ca, cb, cc, amp, dimg, height, width, tile, n_tx, pair_grad):
    """pair_grad[j] = (dL/damp, dL/dmx, dL/dmy, dL/dca, dL/dcb, dL/dcc) for pair j."""
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        u0 = tx * tile
        v0 = ty * tile
        u1 = min(u0 + tile, width)
        v1 = min(v0 + tile, height)
        for j in range(offsets[t], offsets[t + 1]):
            k = kid[j]
            a = ca[k]
            b = cb[k]
            c = cc[k]
            A = amp[k]
            K = np.exp(-a)
            g_amp = 0.0
            g_mx = 0.0
            g_my = 0.0
            g_a = 0.0
            g_b = 0.0
            g_c = 0.0
            for v in range(v0, v1):
                x0, dx0, dy, g0 = _row_start(mx[k], my[k], a, b, c, v, u0, u1)
                if g0 < TINY:
                    continue
                for side in range(2):
                    if side == 0:
                        u = x0
                        stop = u1
                        step = 1
                        G = g0
                        r = np.exp(-0.5 * (a * (2.0 * dx0 + 1.0) + 2.0 * b * dy)) if x0 + 1 < u1 else 0.0
                    else:
                        if x0 == u0:
                            break
                        u = x0 - 1
                        stop = u0 - 1
                        step = -1
                        r = np.exp(-0.5 * (a * (1.0 - 2.0 * dx0) - 2.0 * b * dy))
                        G = g0 * r
                        r *= K
                    while u != stop:
                        if G < TINY:
                            break
                        gi = dimg[v, u]
                        if gi != 0.0:
                            dx = u + 0.5 - mx[k]
                            gG = gi * G
                            g_amp += gG
                            w = gG * A
                            g_mx += w * (a * dx + b * dy)
                            g_my += w * (b * dx + c * dy)
                            g_a -= 0.5 * w * dx * dx
                            g_b -= w * dx * dy
                            g_c -= 0.5 * w * dy * dy
                        G *= r
                        r *= K
                        u += step
            pair_grad[j, 0] = g_amp
            pair_grad[j, 1] = g_mx
            pair_grad[j, 2] = g_my
            pair_grad[j, 3] = g_a
            pair_grad[j, 4] = g_b
            pair_grad[j, 5] = g_c


# 3D: evaluating the kernel sum on a voxel grid


@numba.njit(parallel=True, cache=True)
def voxel_forward(offsets, kid, mean, conic, amp, origin, spacing, dims, tile, grid, out):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        j0 = offsets[t]
        j1 = offsets[t + 1]
        if j1 == j0:
            continue
        tx = t % grid[0]
        rest = t // grid[0]
        ty = rest % grid[1]
        tz = rest // grid[1]
        x0 = tx * tile
        y0 = ty * tile
        z0 = tz * tile
        nx = min(tile, dims[0] - x0)
        ny = min(tile, dims[1] - y0)
        nz = min(tile, dims[2] - z0)
        buf = np.zeros((nx, ny, nz))
        # kernel-major: every voxel still sums its kernels in pair order
        for j in range(j0, j1):
            k = kid[j]
            a00 = conic[k, 0]
            a01 = conic[k, 1]
            a02 = conic[k, 2]
            a11 = conic[k, 3]
            a12 = conic[k, 4]
            a22 = conic[k, 5]
            mx = mean[k, 0]
            my = mean[k, 1]
            mz = mean[k, 2]
            rho = amp[k]
            for ix in range(nx):
                dx = origin[0] + (x0 + ix + 0.5) * spacing[0] - mx
                for iy in range(ny):
                    dy = origin[1] + (y0 + iy + 0.5) * spacing[1] - my
                    pxy = a00 * dx * dx + a11 * dy * dy + 2.0 * a01 * dx * dy
                    lin = 2.0 * (a02 * dx + a12 * dy)
                    for iz in range(nz):
                        dz = origin[2] + (z0 + iz + 0.5) * spacing[2] - mz
                        power = pxy + lin * dz + a22 * dz * dz
                        buf[ix, iy, iz] += rho * np.exp(-0.5 * power)
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    out[x0 + ix, y0 + iy, z0 + iz] = buf[ix, iy, iz]


@numba.njit(parallel=True, cache=True)
def voxel_backward(offsets, kid, mean, conic, amp, origin, spacing, dims, tile, grid, dvol, pair_grad):
    """pair_grad[j] = (dL/damp, dL/dmean[3], dL/dconic[6]) with conic packed as 00,01,02,11,12,22."""
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tx = t % grid[0]
        rest = t // grid[0]
        ty = rest % grid[1]
        tz = rest // grid[1]
        x0 = tx * tile
        y0 = ty * tile
        z0 = tz * tile
        nx = min(tile, dims[0] - x0)
        ny = min(tile, dims[1] - y0)
        nz = min(tile, dims[2] - z0)
        for j in range(offsets[t], offsets[t + 1]):
            k = kid[j]
            a00 = conic[k, 0]
            a01 = conic[k, 1]
            a02 = conic[k, 2]
            a11 = conic[k, 3]
            a12 = conic[k, 4]
            a22 = conic[k, 5]
            mx = mean[k, 0]
            my = mean[k, 1]
            mz = mean[k, 2]
            rho = amp[k]
            g_amp = 0.0
            g_x = 0.0
            g_y = 0.0
            g_z = 0.0
            g00 = 0.0
            g01 = 0.0
            g02 = 0.0
            g11 = 0.0
            g12 = 0.0
            g22 = 0.0
            for ix in range(nx):
                dx = origin[0] + (x0 + ix + 0.5) * spacing[0] - mx
                for iy in range(ny):
                    dy = origin[1] + (y0 + iy + 0.5) * spacing[1] - my
                    for iz in range(nz):
                        g = dvol[x0 + ix, y0 + iy, z0 + iz]
                        if g == 0.0:
                            continue
                        dz = origin[2] + (z0 + iz + 0.5) * spacing[2] - mz
                        power = (a00 * dx * dx + a11 * dy * dy + a22 * dz * dz
                                 + 2.0 * (a01 * dx * dy + a02 * dx * dz + a12 * dy * dz))
                        gG = g * np.exp(-0.5 * power)
                        g_amp += gG
                        w = gG * rho
                        g_x += w * (a00 * dx + a01 * dy + a02 * dz)
                        g_y += w * (a01 * dx + a11 * dy + a12 * dz)
                        g_z += w * (a02 * dx + a12 * dy + a22 * dz)
                        g00 -= 0.5 * w * dx * dx
                        g01 -= w * dx * dy
                        g02 -= w * dx * dz
                        g11 -= 0.5 * w * dy * dy
                        g12 -= w * dy * dz
                        g22 -= 0.5 * w * dz * dz
            pair_grad[j, 0] = g_amp
            pair_grad[j, 1] = g_x
            pair_grad[j, 2] = g_y
            pair_grad[j, 3] = g_z
            pair_grad[j, 4] = g00
            pair_grad[j, 5] = g01
            pair_grad[j, 6] = g02
            pair_grad[j, 7] = g11
            pair_grad[j, 8] = g12
            pair_grad[j, 9] = g22


def set_threads(n: int):
    """Set the worker count for tile kernels; 0 keeps numba's default (all cores)."""
    if n and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
