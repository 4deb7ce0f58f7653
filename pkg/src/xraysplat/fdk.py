"""Feldkamp (FDK) cone-beam reconstruction and FDK-based cloud initialisation."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .errors import InsufficientViews, TooFewOccupiedVoxels
from .gaussians import GaussianCloud
from .geometry import ScannerConfig, to_scanner, view_transform
from .voxelizer import DensityVolume, GridSpec

__all__ = ["ramp_filter", "filter_projections", "fdk_reconstruct", "sample_init_cloud", "random_init_cloud"]

FILTERS = ("ram-lak", "hann")


def ramp_filter(n_pad: int, pitch: float, window: str = "hann") -> np.ndarray:
    """Frequency response of the band-limited ramp for ``n_pad``-point FFT filtering.

    Built as the FFT of the spatial Ram-Lak kernel, which keeps the DC term
    correct; ``window="hann"`` tapers it with 0.5 * (1 + cos(2 pi f)).
    """
    if window not in FILTERS:
        raise ValueError(f"window must be one of {FILTERS}")
    n = np.concatenate([np.arange(0, n_pad // 2 + 1), np.arange(-(n_pad // 2) + 1, 0)])
    h = np.zeros(n_pad)
    h[0] = 0.25 / pitch**2
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * pitch) ** 2
    H = np.real(np.fft.fft(h)) * pitch
    if window == "hann":
        f = np.fft.fftfreq(n_pad)
        H *= 0.5 * (1.0 + np.cos(2 * np.pi * f))
    return H


def filter_projections(images: np.ndarray, config: ScannerConfig, window: str = "hann") -> np.ndarray:
    """Cosine-weight and row-filter projections (N, H, W) on the detector scaled to the rotation centre."""
    w, h = config.detector_pixels
    du, dv = config.pixel_pitch
    mag = config.source_to_detector / config.source_to_object
    a = (np.arange(w) + 0.5 - 0.5 * w) * du / mag
    b = (np.arange(h) + 0.5 - 0.5 * h) * dv / mag
    d = config.source_to_object
    cos_w = d / np.sqrt(d**2 + a[None, :] ** 2 + b[:, None] ** 2)
    n_pad = 1 << int(math.ceil(math.log2(2 * w)))
    H = ramp_filter(n_pad, du / mag, window)
    weighted = np.asarray(images, dtype=np.float64) * cos_w
    spec = np.fft.rfft(weighted, n=n_pad, axis=-1)
    return np.fft.irfft(spec * H[: n_pad // 2 + 1], n=n_pad, axis=-1)[..., :w]


def fdk_reconstruct(projections, grid: GridSpec, window: str = "hann", config: Optional[ScannerConfig] = None
                    ) -> DensityVolume:
    """Weighted filtered backprojection over a full circular scan.

    Parameters
    ----------
    projections : ProjectionSet
        Log-domain projections; at least two views.
    grid : GridSpec
        Output grid.
    window : {"hann", "ram-lak"}
        Apodisation of the ramp filter.

    Returns
    -------
    DensityVolume
    """
    config = projections.scanner if config is None else config
    images = np.asarray(projections.images)
    n = images.shape[0]
    if n < 2:
        raise InsufficientViews(f"FDK needs at least 2 views, got {n}")
    filtered = filter_projections(images, config, window)
    fx, fy = config.focal
    cx, cy = config.principal_point
    pts = grid.centers().reshape(-1, 3)
    out = np.zeros(pts.shape[0])
    d = config.source_to_object
    for theta, q in zip(config.angles, filtered):
        ps = to_scanner(pts, view_transform(config, theta))
        z = ps[:, 2]
        u = fx * ps[:, 0] / z + cx - 0.5
        v = fy * ps[:, 1] / z + cy - 0.5
        vals = map_coordinates(q, np.stack([v, u]), order=1, mode="constant", cval=0.0)
        out += (d / z) ** 2 * vals
    # 1/2 * dbeta with dbeta = 2 pi / n for a full circle
    out *= math.pi / n
    return DensityVolume.on(grid, out)


def _nearest_neighbour_distance(points: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(points).query(points, k=2)
    return dist[:, 1]


def sample_init_cloud(volume: DensityVolume, M: int = 50000, tau: float = 0.05, k: float = 0.15,
                      rng: Optional[np.random.Generator] = None, s_min: Optional[float] = None) -> GaussianCloud:
    """Seed kernels inside the occupied part of a (coarse) reconstruction.

    Positions are drawn without replacement from voxels whose density exceeds
    ``tau`` and jittered uniformly inside their voxel. Each kernel is isotropic
    with scale equal to its nearest-neighbour distance, and its density is
    ``k`` times the value of the voxel it was drawn from.
    """
    rng = np.random.default_rng() if rng is None else rng
    data = np.asarray(volume.data)
    occupied = np.flatnonzero(data.ravel() > tau)
    if occupied.size < M:
        raise TooFewOccupiedVoxels(f"only {occupied.size} voxels exceed tau={tau}, need {M}")
    spacing = np.asarray(volume.spacing)
    extent = np.asarray(volume.dims) * spacing
    s_min = 1e-4 * float(extent.max()) if s_min is None else s_min
    chosen = np.sort(rng.choice(occupied, size=M, replace=False))
    ijk = np.stack(np.unravel_index(chosen, data.shape), axis=1)
    centres = np.asarray(volume.origin) + (ijk + 0.5) * spacing
    positions = centres + rng.uniform(-0.5, 0.5, size=(M, 3)) * spacing
    if M > 1:
        scale = _nearest_neighbour_distance(positions)
    else:
        scale = np.array([spacing.max()])
    scale = np.clip(scale, 2 * s_min, float(np.linalg.norm(extent)))
    density = k * data.ravel()[chosen]
    return GaussianCloud.from_activated(density, positions, scale, s_min=s_min)


def random_init_cloud(extent_min, extent_max, M: int, rng: np.random.Generator, density: float = 0.01,
                      scale: Optional[float] = None, s_min: Optional[float] = None) -> GaussianCloud:
    """Uniform positions in the box, one fixed isotropic scale and a small density."""
    lo = np.asarray(extent_min, dtype=np.float64)
    hi = np.asarray(extent_max, dtype=np.float64)
    side = float((hi - lo).max())
    s_min = 1e-4 * side if s_min is None else s_min
    if scale is None:
        # half the mean spacing of M points filling the box
        scale = 0.5 * float(np.prod(hi - lo) / M) ** (1 / 3)
    positions = lo + rng.uniform(0.0, 1.0, size=(M, 3)) * (hi - lo)
    return GaussianCloud.from_activated(np.full(M, density), positions, np.full(M, scale), s_min=s_min)
