"""Radiative Gaussian kernels.

Each kernel is a local density field

    G(x) = rho * exp(-0.5 * (x - p)^T Sigma^{-1} (x - p)),   Sigma = R S S^T R^T

and the object density is the plain sum over kernels. Parameters are stored
raw (pre-activation): ``rho = softplus(rho_raw)``, ``s = s_min + exp(s_raw)``,
``R = rot(q_raw / |q_raw|)`` with quaternions ordered (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import InverseOutOfDomain

PARAM_GROUPS = ("position", "density", "scale", "rotation")
_ATTR = {"position": "position", "density": "rho_raw", "scale": "s_raw", "rotation": "q_raw"}

DENSITY_ACTIVATION = "softplus"
SCALE_ACTIVATION = "exp_plus_floor"


# activations


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(~(y > 0)):
        raise InverseOutOfDomain("softplus inverse needs strictly positive densities")
    # log(expm1(y)) loses precision for large y; y + log(1 - exp(-y)) does not
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def scale_activation(s_raw, s_min: float):
    return s_min + np.exp(np.asarray(s_raw, dtype=np.float64))


def inverse_scale_activation(s, s_min: float):
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > s_min)):
        raise InverseOutOfDomain(f"scales must exceed the floor s_min={s_min:g}")
    return np.log(s - s_min)


# rotations


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q):
    """Rotation matrices for unit quaternions (w, x, y, z); shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotation_backward(q, dR):
    """dL/dq for unit q given dL/dR."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance_from(q_raw, s_raw, s_min: float):
    """Sigma = R S S^T R^T for raw quaternions and raw scales; shape (..., 3, 3)."""
    R = quaternion_to_rotation(normalize_quaternions(q_raw))
    s = scale_activation(s_raw, s_min)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(q_raw, s_raw, s_min: float, dSigma):
    """Chain dL/dSigma (any square layout, symmetrised here) to (dL/dq_raw, dL/ds_raw)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    G = 0.5 * (dSigma + np.swapaxes(dSigma, -1, -2))
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    R = quaternion_to_rotation(q)
    e = np.exp(np.asarray(s_raw, dtype=np.float64))
    s = s_min + e
    # Sigma = sum_k s_k^2 r_k r_k^T  with r_k the k-th column of R
    GR = G @ R
    ds = 2.0 * s * np.einsum("...ik,...ik->...k", R, GR)
    dR = 2.0 * GR * (s * s)[..., None, :]
    dq = _rotation_backward(q, dR)
    dq_raw = (dq - q * np.sum(q * dq, axis=-1, keepdims=True)) / norm
    return dq_raw, ds * e


# data types


@dataclass
class RadiativeGaussian:
    """A single kernel in raw parameters."""

    rho_raw: float
    position: np.ndarray
    s_raw: np.ndarray
    q_raw: np.ndarray
    s_min: float = 1e-6

    @property
    def density(self) -> float:
        return float(softplus(self.rho_raw))

    @property
    def scale(self) -> np.ndarray:
        return scale_activation(self.s_raw, self.s_min)

    def covariance(self) -> np.ndarray:
        return covariance(self)


@dataclass
class GaussianCloud:
    """Structure-of-arrays kernel set with optimizer and densification state.

    Attributes
    ----------
    rho_raw : (M,) array
    position : (M, 3) array, mm
    s_raw : (M, 3) array
    q_raw : (M, 4) array
    s_min : float
        Scale floor in mm.
    exp_avg, exp_avg_sq : dict
        Adam first/second moments per parameter group.
    grad2d_accum, grad2d_count, grad3d_accum :
        Accumulated screen-space positional gradient norms, visibility counts
        and summed world-space positional gradients since the last
        adaptive-control pass.
    """

    rho_raw: np.ndarray
    position: np.ndarray
    s_raw: np.ndarray
    q_raw: np.ndarray
    s_min: float
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    grad2d_accum: Optional[np.ndarray] = None
    grad2d_count: Optional[np.ndarray] = None
    grad3d_accum: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rho_raw = np.ascontiguousarray(self.rho_raw, dtype=np.float64).reshape(-1)
        m = self.rho_raw.shape[0]
        self.position = np.ascontiguousarray(self.position, dtype=np.float64).reshape(m, 3)
        self.s_raw = np.ascontiguousarray(self.s_raw, dtype=np.float64).reshape(m, 3)
        self.q_raw = np.ascontiguousarray(self.q_raw, dtype=np.float64).reshape(m, 4)
        for group in PARAM_GROUPS:
            shape = getattr(self, _ATTR[group]).shape
            self.exp_avg.setdefault(group, np.zeros(shape))
            self.exp_avg_sq.setdefault(group, np.zeros(shape))
        if self.grad2d_accum is None:
            self.reset_densify_stats()

    @classmethod
    def from_activated(cls, density, position, scale, rotation=None, s_min=1e-6) -> "GaussianCloud":
        """Build a cloud from activated values (densities, mm scales, quaternions)."""
        position = np.asarray(position, dtype=np.float64).reshape(-1, 3)
        m = position.shape[0]
        density = np.broadcast_to(np.asarray(density, dtype=np.float64), (m,))
        scale = np.asarray(scale, dtype=np.float64)
        if scale.ndim == 1 and scale.shape[0] == m and m != 3:
            scale = scale[:, None]  # one isotropic scale per kernel
        scale = np.broadcast_to(scale, (m, 3))
        if rotation is None:
            rotation = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
        return cls(
            rho_raw=inverse_softplus(density),
            position=position,
            s_raw=inverse_scale_activation(scale, s_min),
            q_raw=normalize_quaternions(np.asarray(rotation, dtype=np.float64).reshape(m, 4)),
            s_min=s_min,
        )

    @classmethod
    def empty(cls, s_min=1e-6) -> "GaussianCloud":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), s_min)

    def __len__(self) -> int:
        return self.rho_raw.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    @property
    def density(self) -> np.ndarray:
        return softplus(self.rho_raw)

    @property
    def scale(self) -> np.ndarray:
        return scale_activation(self.s_raw, self.s_min)

    @property
    def rotation(self) -> np.ndarray:
        return normalize_quaternions(self.q_raw)

    def covariances(self) -> np.ndarray:
        return covariance_from(self.q_raw, self.s_raw, self.s_min)

    def param(self, group: str) -> np.ndarray:
        return getattr(self, _ATTR[group])

    def set_param(self, group: str, value: np.ndarray):
        setattr(self, _ATTR[group], value)

    def kernel(self, i: int) -> RadiativeGaussian:
        return RadiativeGaussian(
            float(self.rho_raw[i]), self.position[i].copy(), self.s_raw[i].copy(), self.q_raw[i].copy(), self.s_min
        )

    def reset_densify_stats(self):
        m = len(self)
        self.grad2d_accum = np.zeros(m)
        self.grad2d_count = np.zeros(m)
        self.grad3d_accum = np.zeros((m, 3))

    def _per_kernel_arrays(self):
        arrays = {
            "rho_raw": self.rho_raw,
            "position": self.position,
            "s_raw": self.s_raw,
            "q_raw": self.q_raw,
            "grad2d_accum": self.grad2d_accum,
            "grad2d_count": self.grad2d_count,
            "grad3d_accum": self.grad3d_accum,
        }
        for group in PARAM_GROUPS:
            arrays["exp_avg." + group] = self.exp_avg[group]
            arrays["exp_avg_sq." + group] = self.exp_avg_sq[group]
        return arrays

    def _from_arrays(self, arrays) -> "GaussianCloud":
        return GaussianCloud(
            rho_raw=arrays["rho_raw"],
            position=arrays["position"],
            s_raw=arrays["s_raw"],
            q_raw=arrays["q_raw"],
            s_min=self.s_min,
            exp_avg={g: arrays["exp_avg." + g] for g in PARAM_GROUPS},
            exp_avg_sq={g: arrays["exp_avg_sq." + g] for g in PARAM_GROUPS},
            grad2d_accum=arrays["grad2d_accum"],
            grad2d_count=arrays["grad2d_count"],
            grad3d_accum=arrays["grad3d_accum"],
        )

    def select(self, index) -> "GaussianCloud":
        """Subset (boolean mask or integer index); all per-kernel state follows."""
        return self._from_arrays({k: np.array(v[index]) for k, v in self._per_kernel_arrays().items()})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        a, b = self._per_kernel_arrays(), other._per_kernel_arrays()
        return self._from_arrays({k: np.concatenate([a[k], b[k]]) for k in a})

    def copy(self) -> "GaussianCloud":
        return self.select(slice(None))

    def params_only(self) -> "GaussianCloud":
        """Copy with fresh optimizer and densification state."""
        return GaussianCloud(self.rho_raw.copy(), self.position.copy(), self.s_raw.copy(), self.q_raw.copy(), self.s_min)


def covariance(g: RadiativeGaussian) -> np.ndarray:
    return covariance_from(g.q_raw, g.s_raw, g.s_min)


def density_at(cloud: GaussianCloud, x, chunk: int = 4096) -> np.ndarray:
    """Full (unculled) kernel sum at points ``x`` of shape (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    pts = x.reshape(-1, 3)
    out = np.zeros(pts.shape[0])
    if len(cloud) == 0:
        return out.reshape(x.shape[:-1])
    prec = np.linalg.inv(cloud.covariances())
    rho = cloud.density
    for start in range(0, pts.shape[0], chunk):
        d = pts[start:start + chunk, None, :] - cloud.position[None, :, :]
        power = np.einsum("nmi,mij,nmj->nm", d, prec, d)
        out[start:start + chunk] = np.exp(-0.5 * power) @ rho
    return out.reshape(x.shape[:-1])


@dataclass
class CloudGradients:
    """Gradients with respect to the raw parameters of a cloud."""

    rho_raw: np.ndarray
    position: np.ndarray
    s_raw: np.ndarray
    q_raw: np.ndarray
    means2d: Optional[np.ndarray] = None  # screen-space positional gradient, (M, 2) in NDC units

    @classmethod
    def zeros(cls, m: int) -> "CloudGradients":
        return cls(np.zeros(m), np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)))

    def group(self, name: str) -> np.ndarray:
        return getattr(self, _ATTR[name])

    def __add__(self, other: "CloudGradients") -> "CloudGradients":
        return CloudGradients(
            self.rho_raw + other.rho_raw,
            self.position + other.position,
            self.s_raw + other.s_raw,
            self.q_raw + other.q_raw,
            self.means2d if self.means2d is not None else other.means2d,
        )

    def scaled(self, factor: float) -> "CloudGradients":
        return CloudGradients(
            self.rho_raw * factor,
            self.position * factor,
            self.s_raw * factor,
            self.q_raw * factor,
            None if self.means2d is None else self.means2d * factor,
        )

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a), initial=0.0)) for a in (self.rho_raw, self.position, self.s_raw, self.q_raw))
