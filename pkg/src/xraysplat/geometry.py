"""Circular cone-beam scanner model.

World space has the rotation axis along +z and the rotation centre at the
origin. Scanner space has its origin at the X-ray source and its +z axis
pointing at the detector centre; detector columns (u) run along scanner +x
and detector rows (v) along scanner +y. Pixel ``(u, v)`` has its centre at
continuous detector coordinate ``(u + 0.5, v + 0.5)``.

Ray space is reached with the perspective map

    phi(x, y, z) = (f_x * x / z + c_x,  f_y * y / z + c_y,  ||(x, y, z)||)

so the first two coordinates are detector pixels and the third is Euclidean
distance from the source, i.e. arclength along the viewing ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, KernelBehindSource

__all__ = [
    "ScannerConfig",
    "ViewTransform",
    "Ray",
    "fov",
    "view_transform",
    "local_jacobian",
    "jacobians",
    "to_scanner",
    "project_points",
    "pixel_ray",
    "pixel_rays",
    "circular_angles",
]


def circular_angles(n_views: int, start: float = 0.0, span: float = 2 * math.pi) -> np.ndarray:
    """Equally spaced view angles over ``[start, start + span)``."""
    if n_views < 1:
        raise ConfigError("n_views must be >= 1", key="n_views")
    return start + span * np.arange(n_views, dtype=np.float64) / n_views


@dataclass(frozen=True)
class ScannerConfig:
    """Cone-beam geometry.

    Parameters
    ----------
    source_to_object : float
        L_SO, source to rotation-centre distance (mm).
    source_to_detector : float
        L_SD, source to detector-plane distance (mm).
    detector_size : (float, float)
        Physical detector size (D_x, D_y) in mm.
    detector_pixels : (int, int)
        Detector resolution (W, H).
    angles : sequence of float
        View angles in radians.
    volume_extent : (float, float, float)
        Side lengths (mm) of the reconstruction box, centred on the origin.
    near_clip : float, optional
        Kernels closer than this to the source (along scanner z) are culled.
        Defaults to 1% of L_SO.
    """

    source_to_object: float
    source_to_detector: float
    detector_size: tuple
    detector_pixels: tuple
    angles: tuple
    volume_extent: tuple
    near_clip: Optional[float] = None
    check_frustum: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "detector_size", tuple(float(v) for v in self.detector_size))
        set_(self, "detector_pixels", tuple(int(v) for v in self.detector_pixels))
        set_(self, "angles", tuple(float(a) for a in np.atleast_1d(self.angles)))
        set_(self, "volume_extent", tuple(float(v) for v in self.volume_extent))
        if self.near_clip is None:
            set_(self, "near_clip", 0.01 * float(self.source_to_object))

        if not self.source_to_object > 0:
            raise ConfigError("source_to_object_mm must be positive", key="source_to_object_mm")
        if not self.source_to_detector > self.source_to_object:
            raise ConfigError(
                "source_to_detector_mm must exceed source_to_object_mm", key="source_to_detector_mm"
            )
        if len(self.detector_size) != 2 or min(self.detector_size) <= 0:
            raise ConfigError("detector_size_mm needs two positive entries", key="detector_size_mm")
        if len(self.detector_pixels) != 2 or min(self.detector_pixels) <= 0:
            raise ConfigError("detector_pixels needs two positive entries", key="detector_pixels")
        if len(self.volume_extent) != 3 or min(self.volume_extent) <= 0:
            raise ConfigError("volume_extent_mm needs three positive entries", key="volume_extent_mm")
        if len(self.angles) == 0 or not all(math.isfinite(a) for a in self.angles):
            raise ConfigError("angles_rad must be a non-empty list of finite values", key="angles_rad")
        if not 0 < self.near_clip < self.source_to_object:
            raise ConfigError("near_clip_mm must lie in (0, source_to_object_mm)", key="near_clip_mm")
        if self.check_frustum:
            self._check_frustum()

    def _check_frustum(self):
        half = 0.5 * np.asarray(self.volume_extent)
        corners = np.array(np.meshgrid(*[[-h, h] for h in half], indexing="ij")).reshape(3, -1).T
        for theta in self.angles:
            ps = to_scanner(corners, view_transform(self, theta))
            if np.any(ps[:, 2] <= self.near_clip):
                raise ConfigError("volume box reaches behind the source", key="volume_extent_mm")
            uv = project_points(self, ps)
            w, h = self.detector_pixels
            if np.any(uv[:, 0] < 0) or np.any(uv[:, 0] > w) or np.any(uv[:, 1] < 0) or np.any(uv[:, 1] > h):
                raise ConfigError(
                    f"volume box leaves the detector at angle {theta:.4f} rad", key="volume_extent_mm"
                )

    # derived quantities

    @property
    def width(self) -> int:
        return self.detector_pixels[0]

    @property
    def height(self) -> int:
        return self.detector_pixels[1]

    @property
    def pixel_pitch(self) -> tuple:
        """Detector pixel size (mm) along u and v."""
        return (self.detector_size[0] / self.width, self.detector_size[1] / self.height)

    @property
    def focal(self) -> tuple:
        """Focal lengths (f_x, f_y) in pixels."""
        du, dv = self.pixel_pitch
        return (self.source_to_detector / du, self.source_to_detector / dv)

    @property
    def principal_point(self) -> tuple:
        return (0.5 * self.width, 0.5 * self.height)

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def extent_min(self) -> np.ndarray:
        return -0.5 * np.asarray(self.volume_extent)

    @property
    def extent_max(self) -> np.ndarray:
        return 0.5 * np.asarray(self.volume_extent)

    def with_angles(self, angles) -> "ScannerConfig":
        return ScannerConfig(
            self.source_to_object,
            self.source_to_detector,
            self.detector_size,
            self.detector_pixels,
            tuple(np.atleast_1d(angles)),
            self.volume_extent,
            self.near_clip,
            check_frustum=self.check_frustum,
        )

    @classmethod
    def desk(
        cls,
        n_views: int = 50,
        detector_pixels: int = 128,
        volume_side: float = 16.0,
        magnification: float = 1.5,
        distance_ratio: float = 4.0,
        angle_span: float = 2 * math.pi,
    ) -> "ScannerConfig":
        """Small full-circle geometry whose detector just covers the volume.

        L_SO is ``distance_ratio`` times the volume side; the detector is sized
        so the volume's circumscribed cylinder projects inside it with a 5%
        margin at every angle.
        """
        l_so = distance_ratio * volume_side
        l_sd = magnification * l_so
        r_xy = volume_side / math.sqrt(2.0)
        half_h = l_sd * math.tan(math.asin(r_xy / l_so))
        half_v = l_sd * (0.5 * volume_side) / (l_so - r_xy)
        side = 2.0 * 1.05 * max(half_h, half_v)
        return cls(
            source_to_object=l_so,
            source_to_detector=l_sd,
            detector_size=(side, side),
            detector_pixels=(detector_pixels, detector_pixels),
            angles=tuple(circular_angles(n_views, 0.0, angle_span)),
            volume_extent=(volume_side,) * 3,
        )

    # serialization

    def to_dict(self) -> dict:
        return {
            "source_to_object_mm": self.source_to_object,
            "source_to_detector_mm": self.source_to_detector,
            "detector_size_mm": list(self.detector_size),
            "detector_pixels": list(self.detector_pixels),
            "angles_rad": list(self.angles),
            "volume_extent_mm": list(self.volume_extent),
            "near_clip_mm": self.near_clip,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScannerConfig":
        from .io import ScannerConfigFile, validation_error_to_config_error

        try:
            parsed = ScannerConfigFile.model_validate(data)
        except Exception as exc:  # pydantic.ValidationError
            raise validation_error_to_config_error(exc) from None
        if parsed.angles_rad is not None:
            angles = parsed.angles_rad
        else:
            angles = circular_angles(parsed.n_views, parsed.angle_start_rad, parsed.angle_span_rad)
        return cls(
            source_to_object=parsed.source_to_object_mm,
            source_to_detector=parsed.source_to_detector_mm,
            detector_size=parsed.detector_size_mm,
            detector_pixels=parsed.detector_pixels,
            angles=tuple(angles),
            volume_extent=parsed.volume_extent_mm,
            near_clip=parsed.near_clip_mm,
        )


@dataclass(frozen=True)
class ViewTransform:
    """Rigid world-to-scanner transform ``p_s = W @ p + t``."""

    W: np.ndarray
    t: np.ndarray
    theta: float

    @property
    def source_world(self) -> np.ndarray:
        return -self.W.T @ self.t


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: Optional[float] = None
    t_far: Optional[float] = None

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def fov(config: ScannerConfig) -> tuple:
    """Full field-of-view angles (radians) along detector u and v."""
    dx, dy = config.detector_size
    return (
        2.0 * math.atan(dx / (2.0 * config.source_to_detector)),
        2.0 * math.atan(dy / (2.0 * config.source_to_detector)),
    )


def view_transform(config: ScannerConfig, theta: float) -> ViewTransform:
    s, c = math.sin(theta), math.cos(theta)
    W = np.array([[-s, c, 0.0], [0.0, 0.0, -1.0], [-c, -s, 0.0]])
    t = np.array([0.0, 0.0, float(config.source_to_object)])
    return ViewTransform(W=W, t=t, theta=float(theta))


def to_scanner(points: np.ndarray, view: ViewTransform) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ view.W.T + view.t


def project_points(config: ScannerConfig, p_scanner: np.ndarray) -> np.ndarray:
    """First two components of phi (detector pixel coordinates)."""
    p = np.asarray(p_scanner, dtype=np.float64)
    fx, fy = config.focal
    cx, cy = config.principal_point
    return np.stack([fx * p[..., 0] / p[..., 2] + cx, fy * p[..., 1] / p[..., 2] + cy], axis=-1)


def ray_space(config: ScannerConfig, p_scanner: np.ndarray) -> np.ndarray:
    """Full perspective map phi, including the distance coordinate."""
    p = np.asarray(p_scanner, dtype=np.float64)
    uv = project_points(config, p)
    return np.concatenate([uv, np.linalg.norm(p, axis=-1, keepdims=True)], axis=-1)


def jacobians(config: ScannerConfig, p_scanner: np.ndarray) -> np.ndarray:
    """Jacobians of phi at each row of ``p_scanner``; shape (..., 3, 3). No clipping."""
    p = np.asarray(p_scanner, dtype=np.float64)
    fx, fy = config.focal
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    inv_z = 1.0 / z
    inv_l = 1.0 / np.sqrt(x * x + y * y + z * z)
    J = np.zeros(p.shape[:-1] + (3, 3))
    J[..., 0, 0] = fx * inv_z
    J[..., 0, 2] = -fx * x * inv_z * inv_z
    J[..., 1, 1] = fy * inv_z
    J[..., 1, 2] = -fy * y * inv_z * inv_z
    J[..., 2, 0] = x * inv_l
    J[..., 2, 1] = y * inv_l
    J[..., 2, 2] = z * inv_l
    return J


def local_jacobian(config: ScannerConfig, p_scanner) -> np.ndarray:
    """Local affine approximation of phi at a single scanner-space point."""
    p = np.asarray(p_scanner, dtype=np.float64)
    if p[2] < config.near_clip:
        raise KernelBehindSource(f"depth {p[2]:.4g} mm is inside the near clip {config.near_clip:.4g} mm")
    return jacobians(config, p)


def pixel_ray(config: ScannerConfig, theta: float, pixel) -> Ray:
    """World-space ray from the source through the centre of pixel ``(u, v)``."""
    u, v = pixel
    origins, dirs = _rays_for(config, theta, np.array([u + 0.5]), np.array([v + 0.5]))
    return Ray(origin=origins[0], direction=dirs[0])


def pixel_rays(config: ScannerConfig, theta: float):
    """Origins and unit directions for every pixel centre, each shaped (H, W, 3)."""
    w, h = config.detector_pixels
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    origins, dirs = _rays_for(config, theta, uu.ravel(), vv.ravel())
    return origins.reshape(h, w, 3), dirs.reshape(h, w, 3)


def _rays_for(config, theta, u_cont, v_cont):
    view = view_transform(config, theta)
    fx, fy = config.focal
    cx, cy = config.principal_point
    d_s = np.stack([(u_cont - cx) / fx, (v_cont - cy) / fy, np.ones_like(u_cont)], axis=-1)
    d_s /= np.linalg.norm(d_s, axis=-1, keepdims=True)
    dirs = d_s @ view.W  # W^T applied to row vectors
    origins = np.broadcast_to(view.source_world, dirs.shape).copy()
    return origins, dirs


def volume_box_hits(config: ScannerConfig, origins, dirs, box_min=None, box_max=None):
    """Slab intersection of rays with the reconstruction box; returns (t0, t1) with t1 <= t0 for misses."""
    lo = config.extent_min if box_min is None else np.asarray(box_min)
    hi = config.extent_max if box_max is None else np.asarray(box_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    t_lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    t_hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    t0 = np.maximum(t_lo.max(axis=-1), 0.0)
    t1 = t_hi.min(axis=-1)
    return t0, t1
