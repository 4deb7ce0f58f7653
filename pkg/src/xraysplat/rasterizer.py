"""Differentiable X-ray projection of radiative Gaussians.

Each kernel is moved to ray space with the local affine approximation of the
perspective map, ``Sigma_ray = J W Sigma W^T J^T``. Integrating the 3D
Gaussian along the distance axis leaves a 2D Gaussian on the detector whose
peak is the 3D central density times

    mu = sqrt(2 pi |Sigma_ray| / |Sigma_2d|),

the standard deviation along the ray times sqrt(2 pi). ``mode="biased"``
drops ``mu`` (peak equals the 3D density), which is the uncorrected splatting
formulation kept for ablations. Pixels are the plain sum of all 2D Gaussians
whose 99% ellipse overlaps the pixel's 16x16 tile.

A 0.3 px low-pass is added to every 2D covariance; the peak is scaled by
``sqrt(|Sigma_2d| / |Sigma_2d + eps^2 I|)`` so the footprint integral is
unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _tiles
from .errors import Culled, ConfigError
from .gaussians import CloudGradients, GaussianCloud, RadiativeGaussian, covariance_backward, sigmoid
from .geometry import ScannerConfig, ViewTransform, jacobians, view_transform

TILE_SIZE = 16
CHI2_99_2D = -2.0 * math.log(0.01)  # 9.2103, chi-square 99% quantile with 2 dof
LOWPASS_PX = 0.3
MODES = ("rectified", "biased")

__all__ = [
    "ProjectedGaussian2D",
    "Projection",
    "RenderedProjection",
    "project",
    "project_kernel",
    "render",
    "render_backward",
    "integration_factor",
]


@dataclass
class ProjectedGaussian2D:
    p_hat: np.ndarray  # detector pixel coordinates
    Sigma_hat: np.ndarray  # 2x2, low-pass applied
    rho_hat: float  # mu * rho (rectified) or rho (biased)
    depth: float  # ray-space distance of the centre
    source_index: int
    mu: float
    lowpass_gain: float

    @property
    def peak(self) -> float:
        """Value the splat contributes at its own centre."""
        return self.rho_hat * self.lowpass_gain


@dataclass
class Projection:
    """Per-view projected kernels plus the intermediates needed for backward."""

    theta: float
    mode: str
    lowpass: float
    view: ViewTransform
    visible: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray  # (M, 2, 2) before low-pass
    cov2d_filtered: np.ndarray
    conic: np.ndarray  # (M, 3): inverse of cov2d_filtered packed as a, b, c
    mu: np.ndarray
    lowpass_gain: np.ndarray
    rho: np.ndarray
    amplitude: np.ndarray
    depth: np.ndarray
    p_scanner: np.ndarray
    J: np.ndarray
    M: np.ndarray  # J @ W
    Sigma: np.ndarray
    cov_ray: np.ndarray
    schur: np.ndarray  # |Sigma_ray| / |Sigma_2d|
    tile_lo: np.ndarray
    tile_hi: np.ndarray

    @property
    def rho_hat(self) -> np.ndarray:
        return self.amplitude / self.lowpass_gain


@dataclass
class RenderedProjection:
    image: np.ndarray  # (H, W) log-domain line integrals
    projection: Projection
    bins: _tiles.TileBins

    @property
    def tile_grid(self) -> tuple:
        return self.bins.grid_shape


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}", key="mode")


def _inv2(a, b, c):
    det = a * c - b * b
    return c / det, -b / det, a / det, det


def project(
    cloud: GaussianCloud,
    config: ScannerConfig,
    theta: float,
    mode: str = "rectified",
    lowpass: float = LOWPASS_PX,
) -> Projection:
    """Transform every kernel of ``cloud`` into 2D splats for one view."""
    _check_mode(mode)
    view = view_transform(config, theta)
    m = len(cloud)
    Sigma = cloud.covariances() if m else np.zeros((0, 3, 3))
    p_s = cloud.position @ view.W.T + view.t
    z = p_s[:, 2]
    in_front = z >= config.near_clip
    p_safe = np.where(in_front[:, None], p_s, np.array([0.0, 0.0, config.source_to_object]))

    J = jacobians(config, p_safe)
    Mjw = J @ view.W
    cov_ray = Mjw @ Sigma @ np.swapaxes(Mjw, 1, 2)
    a, b, c = cov_ray[:, 0, 0], cov_ray[:, 0, 1], cov_ray[:, 1, 1]
    det2 = a * c - b * b
    # Schur complement = |Sigma_ray| / |Sigma_2d|, the variance along the ray
    w0 = (c * cov_ray[:, 0, 2] - b * cov_ray[:, 1, 2]) / det2
    w1 = (a * cov_ray[:, 1, 2] - b * cov_ray[:, 0, 2]) / det2
    schur = cov_ray[:, 2, 2] - (w0 * cov_ray[:, 0, 2] + w1 * cov_ray[:, 1, 2])
    schur = np.maximum(schur, 0.0)
    mu = np.sqrt(2.0 * math.pi * schur)

    eps2 = lowpass * lowpass
    af, cf = a + eps2, c + eps2
    ca, cb, cc, det_f = _inv2(af, b, cf)
    gain = np.sqrt(det2 / det_f)
    rho = cloud.density
    amplitude = rho * gain * (mu if mode == "rectified" else 1.0)

    fx, fy = config.focal
    cx, cy = config.principal_point
    means2d = np.stack([fx * p_safe[:, 0] / p_safe[:, 2] + cx, fy * p_safe[:, 1] / p_safe[:, 2] + cy], axis=1)

    rx = np.sqrt(CHI2_99_2D * af)
    ry = np.sqrt(CHI2_99_2D * cf)
    width, height = config.detector_pixels
    n_tx = -(-width // TILE_SIZE)
    n_ty = -(-height // TILE_SIZE)
    overlaps = (
        (means2d[:, 0] + rx >= 0)
        & (means2d[:, 0] - rx <= width)
        & (means2d[:, 1] + ry >= 0)
        & (means2d[:, 1] - ry <= height)
    )
    visible = in_front & overlaps & np.isfinite(amplitude)
    lo = np.stack([np.floor((means2d[:, 0] - rx) / TILE_SIZE), np.floor((means2d[:, 1] - ry) / TILE_SIZE)], axis=1)
    hi = np.stack([np.floor((means2d[:, 0] + rx) / TILE_SIZE), np.floor((means2d[:, 1] + ry) / TILE_SIZE)], axis=1)
    lo = np.clip(np.nan_to_num(lo, nan=0.0), 0, [n_tx - 1, n_ty - 1]).astype(np.int64)
    hi = np.clip(np.nan_to_num(hi, nan=-1.0), -1, [n_tx - 1, n_ty - 1]).astype(np.int64)
    hi[~visible] = -1

    return Projection(
        theta=float(theta),
        mode=mode,
        lowpass=float(lowpass),
        view=view,
        visible=visible,
        means2d=means2d,
        cov2d=cov_ray[:, :2, :2].copy(),
        cov2d_filtered=np.stack([np.stack([af, b], 1), np.stack([b, cf], 1)], 1),
        conic=np.stack([ca, cb, cc], axis=1),
        mu=mu,
        lowpass_gain=gain,
        rho=rho,
        amplitude=np.where(visible, amplitude, 0.0),
        depth=np.linalg.norm(p_safe, axis=1),
        p_scanner=p_s,
        J=J,
        M=Mjw,
        Sigma=Sigma,
        cov_ray=cov_ray,
        schur=schur,
        tile_lo=lo,
        tile_hi=hi,
    )


def integration_factor(cloud: GaussianCloud, config: ScannerConfig, theta: float) -> np.ndarray:
    """mu for every kernel in one view (sqrt(2 pi) times the std-dev along the ray, mm)."""
    return project(cloud, config, theta).mu


def project_kernel(
    g: RadiativeGaussian,
    config: ScannerConfig,
    theta: float,
    mode: str = "rectified",
    lowpass: float = LOWPASS_PX,
    index: int = 0,
) -> ProjectedGaussian2D:
    """Project a single kernel; raises ``Culled`` if it does not reach the detector."""
    cloud = GaussianCloud(np.atleast_1d(g.rho_raw), g.position[None], g.s_raw[None], g.q_raw[None], g.s_min)
    proj = project(cloud, config, theta, mode, lowpass)
    if proj.p_scanner[0, 2] < config.near_clip:
        raise Culled("kernel is behind the near clip plane")
    if not proj.visible[0]:
        raise Culled("kernel's 99% ellipse misses the detector")
    return ProjectedGaussian2D(
        p_hat=proj.means2d[0],
        Sigma_hat=proj.cov2d_filtered[0],
        rho_hat=float(proj.rho_hat[0]),
        depth=float(proj.depth[0]),
        source_index=index,
        mu=float(proj.mu[0]),
        lowpass_gain=float(proj.lowpass_gain[0]),
    )


def render(
    cloud: GaussianCloud,
    config: ScannerConfig,
    theta: float,
    mode: str = "rectified",
    lowpass: float = LOWPASS_PX,
) -> RenderedProjection:
    """Render the log-domain projection of ``cloud`` at view angle ``theta``."""
    proj = project(cloud, config, theta, mode, lowpass)
    width, height = config.detector_pixels
    n_tx = -(-width // TILE_SIZE)
    n_ty = -(-height // TILE_SIZE)
    bins = _tiles.bin_kernels(proj.tile_lo, proj.tile_hi, (n_tx, n_ty))
    image = np.zeros((height, width))
    if bins.n_pairs:
        _tiles.raster_forward(
            bins.offsets,
            bins.kernel_ids,
            np.ascontiguousarray(proj.means2d[:, 0]),
            np.ascontiguousarray(proj.means2d[:, 1]),
            np.ascontiguousarray(proj.conic[:, 0]),
            np.ascontiguousarray(proj.conic[:, 1]),
            np.ascontiguousarray(proj.conic[:, 2]),
            proj.amplitude,
            height,
            width,
            TILE_SIZE,
            n_tx,
            image,
        )
    return RenderedProjection(image=image, projection=proj, bins=bins)


def render_backward(
    cloud: GaussianCloud,
    config: ScannerConfig,
    theta: float,
    dL_dimage: np.ndarray,
    mode: str = "rectified",
    lowpass: float = LOWPASS_PX,
    forward: Optional[RenderedProjection] = None,
    freeze_jacobian: bool = False,
) -> CloudGradients:
    """Exact gradients of ``sum(dL_dimage * render(...).image)`` w.r.t. raw parameters.

    ``forward`` reuses the state of a previous :func:`render` call. The
    returned ``means2d`` field holds the screen-space positional gradient in
    normalised device units (detector spans [-1, 1]), used for densification.
    With ``freeze_jacobian`` the dependence of J on the kernel position is
    ignored, as most splatting implementations do.
    """
    if forward is None:
        forward = render(cloud, config, theta, mode, lowpass)
    proj, bins = forward.projection, forward.bins
    m = len(cloud)
    grads = CloudGradients.zeros(m)
    grads.means2d = np.zeros((m, 2))
    width, height = config.detector_pixels
    dimg = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dimg.shape != (height, width):
        raise ValueError(f"gradient image has shape {dimg.shape}, expected {(height, width)}")
    if bins.n_pairs == 0 or not np.any(dimg):
        return grads

    pair = np.zeros((bins.n_pairs, 6))
    _tiles.raster_backward(
        bins.offsets,
        bins.kernel_ids,
        np.ascontiguousarray(proj.means2d[:, 0]),
        np.ascontiguousarray(proj.means2d[:, 1]),
        np.ascontiguousarray(proj.conic[:, 0]),
        np.ascontiguousarray(proj.conic[:, 1]),
        np.ascontiguousarray(proj.conic[:, 2]),
        proj.amplitude,
        dimg,
        height,
        width,
        TILE_SIZE,
        bins.grid_shape[0],
        pair,
    )
    per_kernel = bins.reduce(pair, m)
    vis = proj.visible
    g_amp = per_kernel[vis, 0]
    g_mean = per_kernel[vis, 1:3]
    g_con = per_kernel[vis, 3:6]

    conic = proj.conic[vis]
    C = np.stack([np.stack([conic[:, 0], conic[:, 1]], 1), np.stack([conic[:, 1], conic[:, 2]], 1)], 1)
    Gc = np.stack(
        [np.stack([g_con[:, 0], 0.5 * g_con[:, 1]], 1), np.stack([0.5 * g_con[:, 1], g_con[:, 2]], 1)], 1
    )
    d_cov2d = -C @ Gc @ C  # through the filtered covariance

    T = g_amp * proj.amplitude[vis]
    rho = proj.rho[vis]
    d_rho = T / rho
    d_cov2d -= 0.5 * T[:, None, None] * C
    cov2d = proj.cov2d[vis]
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    ia, ib, ic, _ = _inv2(a, b, c)
    inv2d = np.stack([np.stack([ia, ib], 1), np.stack([ib, ic], 1)], 1)
    d_cov2d += 0.5 * T[:, None, None] * inv2d

    d_cov_ray = np.zeros((len(T), 3, 3))
    d_cov_ray[:, :2, :2] = d_cov2d
    if proj.mode == "rectified":
        # d log(schur) / d Sigma_ray = v v^T / schur with v = (-Sigma_2d^{-1} b, 1)
        cr = proj.cov_ray[vis]
        v = np.empty((len(T), 3))
        v[:, 0] = -(ia * cr[:, 0, 2] + ib * cr[:, 1, 2])
        v[:, 1] = -(ib * cr[:, 0, 2] + ic * cr[:, 1, 2])
        v[:, 2] = 1.0
        coef = 0.5 * T / proj.schur[vis]
        d_cov_ray += coef[:, None, None] * v[:, :, None] * v[:, None, :]
    d_cov_ray = 0.5 * (d_cov_ray + np.swapaxes(d_cov_ray, 1, 2))

    Mv = proj.M[vis]
    Sig = proj.Sigma[vis]
    d_Sigma = np.swapaxes(Mv, 1, 2) @ d_cov_ray @ Mv
    d_M = 2.0 * d_cov_ray @ Mv @ Sig
    d_J = d_M @ proj.view.W.T

    ps = proj.p_scanner[vis]
    x, y, z = ps[:, 0], ps[:, 1], ps[:, 2]
    fx, fy = config.focal
    d_ps = np.zeros_like(ps)
    d_ps[:, 0] = g_mean[:, 0] * fx / z
    d_ps[:, 1] = g_mean[:, 1] * fy / z
    d_ps[:, 2] = -(g_mean[:, 0] * fx * x + g_mean[:, 1] * fy * y) / (z * z)
    if not freeze_jacobian:
        iz2 = 1.0 / (z * z)
        l = np.sqrt(x * x + y * y + z * z)
        d_ps[:, 0] += d_J[:, 0, 2] * (-fx * iz2)
        d_ps[:, 1] += d_J[:, 1, 2] * (-fy * iz2)
        d_ps[:, 2] += (
            d_J[:, 0, 0] * (-fx * iz2)
            + d_J[:, 0, 2] * (2.0 * fx * x * iz2 / z)
            + d_J[:, 1, 1] * (-fy * iz2)
            + d_J[:, 1, 2] * (2.0 * fy * y * iz2 / z)
        )
        g2 = d_J[:, 2, :]
        n = ps / l[:, None]
        d_ps += (g2 - n * np.sum(g2 * n, axis=1, keepdims=True)) / l[:, None]

    dq, ds = covariance_backward(cloud.q_raw[vis], cloud.s_raw[vis], cloud.s_min, d_Sigma)
    grads.rho_raw[vis] = d_rho * sigmoid(cloud.rho_raw[vis])
    grads.position[vis] = d_ps @ proj.view.W
    grads.s_raw[vis] = ds
    grads.q_raw[vis] = dq
    grads.means2d[vis] = g_mean * (0.5 * np.array([width, height], dtype=np.float64))
    return grads
