"""Tile-based density voxelization with 99%-confidence culling.

The grid is split into 8x8x8 voxel tiles. A kernel is assigned to every tile
that the axis-aligned bounding box of its 99% confidence ellipsoid
(Mahalanobis radius sqrt(11.345)) touches; each voxel then sums its tile's
kernels at the voxel centre.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import chi2

from . import _tiles
from .gaussians import CloudGradients, GaussianCloud, covariance_backward, sigmoid

TILE_SIZE = 8
CHI2_99_3D = float(chi2.ppf(0.99, 3))  # 11.345

__all__ = ["GridSpec", "DensityVolume", "voxelize", "voxelize_backward", "random_subvolume_spec"]


@dataclass(frozen=True)
class GridSpec:
    """Regular grid. ``origin`` is the minimum corner; voxel (i, j, k) is centred at
    ``origin + (index + 0.5) * spacing``."""

    dims: tuple
    origin: tuple
    spacing: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")

    @classmethod
    def covering(cls, extent, dims) -> "GridSpec":
        """Grid of ``dims`` voxels filling a box of side lengths ``extent`` centred on the origin."""
        extent = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
        dims = np.broadcast_to(np.asarray(dims, dtype=np.int64), (3,))
        return cls(tuple(dims), tuple(-0.5 * extent), tuple(extent / dims))

    @property
    def box_min(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def box_max(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.spacing)

    def centers(self) -> np.ndarray:
        """Voxel centres, shape (X, Y, Z, 3)."""
        axes = [o + (np.arange(n) + 0.5) * s for o, n, s in zip(self.origin, self.dims, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class DensityVolume:
    data: np.ndarray  # (X, Y, Z), indexed [ix, iy, iz]
    origin: tuple
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.origin = tuple(float(o) for o in self.origin)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3D")

    @classmethod
    def on(cls, grid: GridSpec, data: np.ndarray) -> "DensityVolume":
        return cls(np.asarray(data).reshape(grid.dims), grid.origin, grid.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.origin, self.spacing)


def _conics(cov: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(cov)
    return np.ascontiguousarray(
        np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 0, 2], inv[:, 1, 1], inv[:, 1, 2], inv[:, 2, 2]], axis=1)
    )


def _bin(cloud: GaussianCloud, grid: GridSpec, cov: np.ndarray, quantile: float):
    dims = np.asarray(grid.dims)
    n_tiles = -(-dims // TILE_SIZE)
    radius = np.sqrt(quantile * np.diagonal(cov, axis1=1, axis2=2))
    origin = np.asarray(grid.origin)
    tile_len = TILE_SIZE * np.asarray(grid.spacing)
    lo_f = np.floor((cloud.position - radius - origin) / tile_len)
    hi_f = np.floor((cloud.position + radius - origin) / tile_len)
    # tile t covers [t, t+1) * tile_len, except the last tile which ends at the grid box
    grid_len = dims * np.asarray(grid.spacing)
    outside = np.any(cloud.position + radius < origin, axis=1) | np.any(cloud.position - radius > origin + grid_len, axis=1)
    lo = np.clip(lo_f, 0, n_tiles - 1).astype(np.int64)
    hi = np.clip(hi_f, -1, n_tiles - 1).astype(np.int64)
    hi[outside] = -1
    return _tiles.bin_kernels(lo, hi, tuple(n_tiles))


@dataclass
class VoxelizeState:
    grid: GridSpec
    bins: _tiles.TileBins
    conic: np.ndarray
    cov: np.ndarray
    rho: np.ndarray


def voxelize(
    cloud: GaussianCloud,
    grid: GridSpec,
    quantile: float = CHI2_99_3D,
    return_state: bool = False,
):
    """Evaluate the culled kernel sum at every voxel centre of ``grid``.

    ``quantile`` is the squared Mahalanobis culling radius (chi-square 99%
    quantile for 3 dof by default).
    """
    out = np.zeros(grid.dims)
    if len(cloud) == 0:
        vol = DensityVolume.on(grid, out)
        return (vol, None) if return_state else vol
    cov = cloud.covariances()
    conic = _conics(cov)
    rho = cloud.density
    bins = _bin(cloud, grid, cov, quantile)
    if bins.n_pairs:
        _tiles.voxel_forward(
            bins.offsets,
            bins.kernel_ids,
            np.ascontiguousarray(cloud.position),
            conic,
            rho,
            np.asarray(grid.origin),
            np.asarray(grid.spacing),
            np.asarray(grid.dims, dtype=np.int64),
            TILE_SIZE,
            np.asarray(bins.grid_shape, dtype=np.int64),
            out,
        )
    vol = DensityVolume.on(grid, out)
    if return_state:
        return vol, VoxelizeState(grid, bins, conic, cov, rho)
    return vol


def voxelize_backward(
    cloud: GaussianCloud,
    grid: GridSpec,
    dL_dV: np.ndarray,
    state: Optional[VoxelizeState] = None,
    quantile: float = CHI2_99_3D,
) -> CloudGradients:
    """Gradients of ``sum(dL_dV * voxelize(cloud, grid).data)`` w.r.t. raw parameters."""
    m = len(cloud)
    grads = CloudGradients.zeros(m)
    dvol = np.ascontiguousarray(dL_dV, dtype=np.float64)
    if dvol.shape != grid.dims:
        raise ValueError(f"gradient volume has shape {dvol.shape}, expected {grid.dims}")
    if m == 0 or not np.any(dvol):
        return grads
    if state is None:
        _, state = voxelize(cloud, grid, quantile, return_state=True)
    bins = state.bins
    if bins.n_pairs == 0:
        return grads
    pair = np.zeros((bins.n_pairs, 10))
    _tiles.voxel_backward(
        bins.offsets,
        bins.kernel_ids,
        np.ascontiguousarray(cloud.position),
        state.conic,
        state.rho,
        np.asarray(grid.origin),
        np.asarray(grid.spacing),
        np.asarray(grid.dims, dtype=np.int64),
        TILE_SIZE,
        np.asarray(bins.grid_shape, dtype=np.int64),
        dvol,
        pair,
    )
    per = bins.reduce(pair, m)
    g = per[:, 4:10]
    G = np.empty((m, 3, 3))
    G[:, 0, 0] = g[:, 0]
    G[:, 1, 1] = g[:, 3]
    G[:, 2, 2] = g[:, 5]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g[:, 1]
    G[:, 0, 2] = G[:, 2, 0] = 0.5 * g[:, 2]
    G[:, 1, 2] = G[:, 2, 1] = 0.5 * g[:, 4]
    P = np.linalg.inv(state.cov)
    d_cov = -P @ G @ P
    dq, ds = covariance_backward(cloud.q_raw, cloud.s_raw, cloud.s_min, d_cov)
    grads.rho_raw = per[:, 0] * sigmoid(cloud.rho_raw)
    grads.position = per[:, 1:4]
    grads.s_raw = ds
    grads.q_raw = dq
    return grads


def random_subvolume_spec(extent_min, extent_max, D: int, spacing, rng: np.random.Generator) -> GridSpec:
    """A D^3 grid with the given spacing placed uniformly at random inside the box."""
    if D < 2:
        raise ValueError("D must be >= 2")
    lo = np.asarray(extent_min, dtype=np.float64)
    hi = np.asarray(extent_max, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    size = D * spacing
    room = hi - lo - size
    if np.any(room < -1e-9 * np.abs(hi - lo)):
        raise ValueError(f"a {D}^3 grid with spacing {tuple(spacing)} does not fit in the extent")
    origin = lo + rng.uniform(0.0, 1.0, 3) * np.maximum(room, 0.0)
    return GridSpec((D, D, D), tuple(origin), tuple(spacing))

