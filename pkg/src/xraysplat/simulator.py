"""Phantoms, the exact ray-marching projector and the detector noise model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from numba import prange

from . import _tiles  # noqa: F401  (numba threading setup)
from . import io
from .errors import DataError, FileFormatError
from .geometry import ScannerConfig, pixel_rays, volume_box_hits
from .voxelizer import DensityVolume, GridSpec

__all__ = [
    "ProjectionSet",
    "SHEPP_LOGAN_ELLIPSOIDS",
    "shepp_logan_ellipsoids",
    "phantom_shepp_logan_3d",
    "ellipsoid_phantom",
    "phantom_from_file",
    "project_volume",
    "add_noise",
    "simulate",
]

# Modified 3D Shepp-Logan table, coordinates normalised to [-1, 1]^3.
# Columns: value, semi-axes (a, b, c), centre (x0, y0, z0), Euler angles (phi, theta, psi) in degrees.
# The tilted pair uses +/-18 degrees about z so that it mirrors across x = 0.
SHEPP_LOGAN_ELLIPSOIDS = np.array([
    [1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0, 0.0, 0.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0, 0.0, 0.0],
    [0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0, 0.0, 0.0],
])


def shepp_logan_ellipsoids() -> np.ndarray:
    return SHEPP_LOGAN_ELLIPSOIDS.copy()


def _euler_zxz(phi, theta, psi):
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        [cp * cf - ct * sf * sp, cp * sf + ct * cf * sp, sp * st],
        [-sp * cf - ct * sf * cp, -sp * sf + ct * cf * cp, cp * st],
        [st * sf, -st * cf, ct],
    ])


def ellipsoid_phantom(points: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Sum of ellipsoid values at normalised points (..., 3).

    Each row's rotation acts on the point coordinates before the centre is
    subtracted, as in the classic phantom generators.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    out = np.zeros(flat.shape[0])
    for value, a, b, c, x0, y0, z0, phi, theta, psi in np.asarray(table):
        R = _euler_zxz(*np.deg2rad([phi, theta, psi]))
        q = flat @ R.T - np.array([x0, y0, z0])
        inside = (q[:, 0] / a) ** 2 + (q[:, 1] / b) ** 2 + (q[:, 2] / c) ** 2 <= 1.0
        out[inside] += value
    return out.reshape(pts.shape[:-1])


def phantom_shepp_logan_3d(dims, extent=16.0, table: Optional[np.ndarray] = None) -> DensityVolume:
    """Point-sampled 3D Shepp-Logan phantom on a grid filling a box of side ``extent`` mm.

    Values are clipped to [0, 1].
    """
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if min(dims) < 16:
        raise ValueError("phantom dims must be >= 16 per axis")
    extent = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
    grid = GridSpec.covering(extent, dims)
    norm = grid.centers() / (0.5 * extent)
    data = ellipsoid_phantom(norm, SHEPP_LOGAN_ELLIPSOIDS if table is None else table)
    return DensityVolume.on(grid, np.clip(data, 0.0, 1.0))


def phantom_from_file(path) -> DensityVolume:
    """Load a volume file or ``.npy`` array and min-max normalise it to [0, 1].

    ``.npy`` arrays get unit spacing and are centred on the origin.
    """
    path = Path(path)
    if path.suffix == ".npy":
        try:
            data = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FileFormatError(f"{path}: {exc}") from None
        if data.ndim != 3:
            raise FileFormatError(f"{path}: expected a 3D array, got shape {data.shape}")
        vol = DensityVolume(data.astype(np.float64), tuple(-0.5 * np.asarray(data.shape)), (1.0, 1.0, 1.0))
    else:
        vol = io.load_volume(path)
    data = vol.data
    if not np.all(np.isfinite(data)):
        raise FileFormatError(f"{path}: volume contains non-finite values")
    lo, hi = float(data.min()), float(data.max())
    data = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
    return DensityVolume(data, vol.origin, vol.spacing)


@numba.njit(parallel=True, cache=True)
def _march(data, origins, dirs, t0, t1, step, origin, spacing, out):
    nx, ny, nz = data.shape
    for r in prange(origins.shape[0]):
        length = t1[r] - t0[r]
        if length <= 0.0:
            out[r] = 0.0
            continue
        n = int(math.ceil(length / step))
        h = length / n
        acc = 0.0
        for k in range(n):
            t = t0[r] + (k + 0.5) * h
            # continuous index with voxel centres at integers, clamped to the edge voxels
            fx = min(max((origins[r, 0] + t * dirs[r, 0] - origin[0]) / spacing[0] - 0.5, 0.0), nx - 1.0)
            fy = min(max((origins[r, 1] + t * dirs[r, 1] - origin[1]) / spacing[1] - 0.5, 0.0), ny - 1.0)
            fz = min(max((origins[r, 2] + t * dirs[r, 2] - origin[2]) / spacing[2] - 0.5, 0.0), nz - 1.0)
            i = min(int(fx), nx - 2) if nx > 1 else 0
            j = min(int(fy), ny - 2) if ny > 1 else 0
            l = min(int(fz), nz - 2) if nz > 1 else 0
            wx = fx - i
            wy = fy - j
            wz = fz - l
            i1 = min(i + 1, nx - 1)
            j1 = min(j + 1, ny - 1)
            l1 = min(l + 1, nz - 1)
            c00 = data[i, j, l] * (1 - wx) + data[i1, j, l] * wx
            c10 = data[i, j1, l] * (1 - wx) + data[i1, j1, l] * wx
            c01 = data[i, j, l1] * (1 - wx) + data[i1, j, l1] * wx
            c11 = data[i, j1, l1] * (1 - wx) + data[i1, j1, l1] * wx
            acc += (c00 * (1 - wy) + c10 * wy) * (1 - wz) + (c01 * (1 - wy) + c11 * wy) * wz
        out[r] = acc * h


def project_volume(volume: DensityVolume, config: ScannerConfig, theta: float, step: Optional[float] = None
                   ) -> np.ndarray:
    """Line integrals of the trilinearly interpolated volume for every detector pixel.

    Each ray is clipped to the volume box and integrated with the composite
    midpoint rule using the largest sub-step not exceeding ``step`` (default:
    half the smallest voxel spacing). Interpolation clamps to the edge voxels.
    """
    spacing = np.asarray(volume.spacing)
    origin = np.asarray(volume.origin)
    step = 0.5 * float(spacing.min()) if step is None else float(step)
    if step <= 0:
        raise ValueError("step must be positive")
    box_max = origin + np.asarray(volume.dims) * spacing
    origins, dirs = pixel_rays(config, theta)
    o = np.ascontiguousarray(origins.reshape(-1, 3))
    d = np.ascontiguousarray(dirs.reshape(-1, 3))
    t0, t1 = volume_box_hits(config, o, d, origin, box_max)
    out = np.zeros(o.shape[0])
    _march(np.ascontiguousarray(volume.data, dtype=np.float64), o, d, t0, t1, step, origin, spacing, out)
    return out.reshape(config.height, config.width)


def add_noise(clean: np.ndarray, I0: float, gauss_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Photon-counting noise applied to log-domain line integrals.

    Counts are Poisson(I0 * exp(-clean)) plus zero-mean Gaussian readout noise
    with standard deviation ``gauss_sigma`` (counts), clamped to >= 1, and
    converted back with log(I0) - log(counts).
    """
    if not I0 > 0:
        raise ValueError("I0 must be positive")
    clean = np.asarray(clean, dtype=np.float64)
    counts = rng.poisson(I0 * np.exp(-clean)).astype(np.float64)
    if gauss_sigma > 0:
        counts = counts + rng.normal(0.0, gauss_sigma, size=clean.shape)
    return math.log(I0) - np.log(np.maximum(counts, 1.0))


@dataclass
class ProjectionSet:
    """Log-domain projections with their scanner and noise metadata.

    ``images`` is (N, H, W) indexed [view, v, u]; ``noise`` holds ``I0``,
    ``gauss_sigma`` and ``seed`` (all None for clean data).
    """

    images: np.ndarray
    scanner: ScannerConfig
    noise: dict = field(default_factory=lambda: {"I0": None, "gauss_sigma": None, "seed": None})

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        n = self.scanner.n_views
        if self.images.ndim != 3 or self.images.shape[0] != n:
            raise DataError(f"expected {n} projections, got array of shape {self.images.shape}")
        if self.images.shape[1:] != (self.scanner.height, self.scanner.width):
            raise DataError("projection size does not match the detector resolution")
        if not np.all(np.isfinite(self.images)):
            raise DataError("projections contain non-finite values")

    @property
    def angles(self) -> np.ndarray:
        return np.asarray(self.scanner.angles)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, index) -> "ProjectionSet":
        index = np.atleast_1d(np.arange(len(self))[index])
        return ProjectionSet(self.images[index], self.scanner.with_angles(self.angles[index]), dict(self.noise))

    def save(self, directory, extra: Optional[dict] = None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, (theta, img) in enumerate(zip(self.angles, self.images)):
            name = f"view_{i:04d}.bin"
            io.save_image(directory / name, img, {"theta_rad": float(theta), "view": i})
            files.append(name)
        manifest = {"scanner": self.scanner.to_dict(), "noise": self.noise, "files": files,
                    "format_version": io.FORMAT_VERSION}
        manifest.update(extra or {})
        io.write_json(directory / "manifest.json", manifest)

    @classmethod
    def load(cls, directory) -> "ProjectionSet":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{directory}: no manifest.json")
        manifest = io.read_json(manifest_path)
        try:
            scanner = ScannerConfig.from_dict(manifest["scanner"])
            files = manifest["files"]
        except KeyError as exc:
            raise FileFormatError(f"{manifest_path}: missing {exc}") from None
        images = []
        for name in files:
            _, img = io.load_image(directory / name)
            images.append(img)
        return cls(np.stack(images), scanner, manifest.get("noise", {}))


def simulate(volume: DensityVolume, scanner: ScannerConfig, I0: Optional[float] = 1e5, gauss_sigma: float = 10.0,
             seed: int = 0, step: Optional[float] = None) -> ProjectionSet:
    """Project ``volume`` at every scanner angle and optionally add detector noise.

    Each view draws from its own stream spawned from ``seed``, so results do
    not depend on evaluation order. ``I0=None`` returns clean projections.
    """
    streams = np.random.SeedSequence(seed).spawn(scanner.n_views)
    images = []
    for theta, ss in zip(scanner.angles, streams):
        clean = project_volume(volume, scanner, theta, step)
        if I0 is not None:
            clean = add_noise(clean, I0, gauss_sigma, np.random.default_rng(ss))
        images.append(clean)
    noise = {"I0": I0, "gauss_sigma": gauss_sigma if I0 is not None else None, "seed": seed}
    return ProjectionSet(np.stack(images), scanner, noise)
