"""Training losses with analytic gradients and volume quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimMismatch

__all__ = [
    "l1_loss",
    "ssim",
    "dssim_loss",
    "tv3d_loss",
    "total_loss",
    "LossTerms",
    "psnr_3d",
    "ssim_slices",
    "gaussian_window",
]

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
PSNR_CAP_DB = 100.0


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(rendered, measured):
    """Mean absolute error and its (sub)gradient w.r.t. ``rendered`` (0 at ties)."""
    a, b = _same_shape(rendered, measured)
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x, g, axes):
    """Separable correlation keeping only fully covered positions."""
    r = (len(g) - 1) // 2
    for ax in axes:
        x = correlate1d(x, g, axis=ax, mode="constant")
        x = np.take(x, np.arange(r, x.shape[ax] - r), axis=ax)
    return x


def _filter_adjoint(y, g, axes, shape):
    r = (len(g) - 1) // 2
    for ax in reversed(axes):
        pad = [(0, 0)] * y.ndim
        pad[ax] = (r, r)
        y = correlate1d(np.pad(y, pad), g[::-1], axis=ax, mode="constant")
    assert y.shape == tuple(shape)
    return y


def _ssim_terms(a, b, data_range, axes):
    g = gaussian_window()
    if any(a.shape[ax] < len(g) for ax in axes):
        raise ValueError(f"images must be at least {len(g)} pixels along each filtered axis")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g, axes)
    mu_b = _filter_valid(b, g, axes)
    e_aa = _filter_valid(a * a, g, axes)
    e_bb = _filter_valid(b * b, g, axes)
    e_ab = _filter_valid(a * b, g, axes)
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * (e_ab - mu_a * mu_b) + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + c2
    S = A1 * A2 / (B1 * B2)
    return g, S, (mu_a, mu_b, A1, A2, B1, B2)


def ssim(a, b, data_range: float = 1.0, return_grad: bool = False):
    """Mean SSIM over all fully covered 11x11 Gaussian windows (sigma 1.5).

    With ``return_grad`` also returns dSSIM/da.
    """
    a, b = _same_shape(a, b)
    axes = (0, 1)
    g, S, (mu_a, mu_b, A1, A2, B1, B2) = _ssim_terms(a, b, data_range, axes)
    value = float(S.mean())
    if not return_grad:
        return value
    n = S.size
    d_mu_a = (2 * mu_b * (A2 - A1) / (B1 * B2) - 2 * mu_a * S * (1 / B1 - 1 / B2)) / n
    d_e_aa = -S / B2 / n
    d_e_ab = 2 * A1 / (B1 * B2) / n
    grad = (_filter_adjoint(d_mu_a, g, axes, a.shape)
            + 2 * a * _filter_adjoint(d_e_aa, g, axes, a.shape)
            + b * _filter_adjoint(d_e_ab, g, axes, a.shape))
    return value, grad


def dssim_loss(rendered, measured, data_range: float = 1.0):
    """(1 - SSIM) / 2 and its gradient w.r.t. ``rendered``."""
    value, grad = ssim(rendered, measured, data_range, return_grad=True)
    return 0.5 * (1.0 - value), -0.5 * grad


def tv3d_loss(volume):
    """Anisotropic TV: mean over the three axes of the mean absolute forward difference.

    Axes of length 1 contribute zero.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError("TV needs a 3D volume")
    value = 0.0
    grad = np.zeros_like(v)
    for ax in range(3):
        if v.shape[ax] < 2:
            continue
        d = np.diff(v, axis=ax)
        value += np.mean(np.abs(d)) / 3.0
        s = np.sign(d) / (3.0 * d.size)
        pad_hi = [(0, 0)] * 3
        pad_lo = [(0, 0)] * 3
        pad_hi[ax] = (0, 1)
        pad_lo[ax] = (1, 0)
        grad += np.pad(s, pad_lo) - np.pad(s, pad_hi)
    return float(value), grad


@dataclass
class LossTerms:
    total: float
    l1: float
    dssim: float
    tv: float
    grad_image: np.ndarray
    grad_volume: Optional[np.ndarray]


def total_loss(rendered, measured, subvolume=None, lambda_ssim: float = 0.25, lambda_tv: float = 0.05,
               data_range: float = 1.0) -> LossTerms:
    """L1 + lambda_ssim * D-SSIM + lambda_tv * TV(subvolume), with gradients.

    ``data_range`` is the SSIM dynamic range (the projection-set maximum in training).
    """
    if lambda_ssim < 0 or lambda_tv < 0:
        raise ValueError("loss weights must be non-negative")
    l1, g_img = l1_loss(rendered, measured)
    ds = 0.0
    if lambda_ssim > 0:
        ds, g_ds = dssim_loss(rendered, measured, data_range)
        g_img = g_img + lambda_ssim * g_ds
    tv, g_vol = 0.0, None
    if subvolume is not None and lambda_tv > 0:
        tv, g_vol = tv3d_loss(subvolume)
        g_vol = lambda_tv * g_vol
    return LossTerms(l1 + lambda_ssim * ds + lambda_tv * tv, l1, ds, tv, g_img, g_vol)


def psnr_3d(volume, reference) -> float:
    """PSNR in dB over the whole volume, peak 1, with ``volume`` clamped to [0, 1]; capped at 100."""
    v, r = _same_shape(volume, reference)
    mse = float(np.mean((np.clip(v, 0.0, 1.0) - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim_slices(volume, reference, data_range: float = 1.0) -> float:
    """Mean 2D SSIM over every axial, coronal and sagittal slice (``volume`` clamped to [0, 1])."""
    v, r = _same_shape(volume, reference)
    if v.ndim != 3:
        raise ValueError("expected 3D volumes")
    v = np.clip(v, 0.0, 1.0)
    per_slice = []
    for ax in range(3):
        axes = tuple(a for a in range(3) if a != ax)
        _, S, _ = _ssim_terms(v, r, data_range, axes)
        per_slice.append(S.mean(axis=axes))
    return float(np.mean(np.concatenate(per_slice)))
