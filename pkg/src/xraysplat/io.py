"""File formats and config schemas.

Arrays (volumes, projections, clouds) share one binary layout::

    uint32 little-endian  header length in bytes
    header                UTF-8 JSON object
    payload               little-endian float32, x-fastest

``dims`` in the header lists axis lengths fastest-first: ``[X, Y, Z]`` for
volumes and ``[W, H]`` for images. Headers carry no timestamps so that equal
inputs give byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, FileFormatError
from .gaussians import DENSITY_ACTIVATION, SCALE_ACTIVATION, GaussianCloud
from .voxelizer import DensityVolume

FORMAT_VERSION = 1
CLOUD_FIELDS = ("rho_raw", "position.x", "position.y", "position.z", "s_raw.x", "s_raw.y", "s_raw.z",
                "q_raw.w", "q_raw.x", "q_raw.y", "q_raw.z")


# config schemas


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScannerConfigFile(_Strict):
    """On-disk scanner description. Either ``angles_rad`` or ``n_views`` is required."""

    source_to_object_mm: float = Field(gt=0)
    source_to_detector_mm: float = Field(gt=0)
    detector_size_mm: Tuple[float, float]
    detector_pixels: Tuple[int, int]
    volume_extent_mm: Tuple[float, float, float]
    angles_rad: Optional[List[float]] = None
    n_views: Optional[int] = Field(default=None, ge=1)
    angle_start_rad: float = 0.0
    angle_span_rad: float = 2 * math.pi
    near_clip_mm: Optional[float] = None

    @model_validator(mode="after")
    def _angles_given(self):
        if self.angles_rad is None and self.n_views is None:
            raise ValueError("give either angles_rad or n_views")
        return self


class MetricsRecord(_Strict):
    """One evaluation result, written as a JSON line."""

    volume: str
    reference: str
    psnr_db: float
    ssim: float
    dims: Tuple[int, int, int]
    clamp: Tuple[float, float] = (0.0, 1.0)
    psnr_cap_db: float = 100.0


def validation_error_to_config_error(exc: Exception) -> ConfigError:
    """Turn a pydantic error into a ConfigError naming the first bad key."""
    if isinstance(exc, ValidationError):
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or None
        where = f"'{key}'" if key else "config"
        return ConfigError(f"{where}: {err['msg']}", key=key)
    return ConfigError(str(exc))


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object at top level")
    return data


def write_json(path, data: dict):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# raw arrays


def write_array(path, data: np.ndarray, header: dict):
    """Write ``data`` (already flattened x-fastest) with a JSON header."""
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    head = dict(header)
    head.update(version=FORMAT_VERSION, dtype="float32", endianness="little")
    raw = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_array(path) -> Tuple[dict, np.ndarray]:
    """Return (header, flat float64 payload)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FileFormatError(f"{path}: truncated file")
    (n,) = struct.unpack("<I", blob[:4])
    try:
        header = json.loads(blob[4:4 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FileFormatError(f"{path}: unreadable header") from None
    if header.get("version") != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise FileFormatError(f"{path}: only little-endian float32 payloads are supported")
    body = blob[4 + n:]
    if len(body) % 4:
        raise FileFormatError(f"{path}: payload is not a whole number of float32 values")
    return header, np.frombuffer(body, dtype="<f4").astype(np.float64)


def save_volume(path, volume: DensityVolume, extra: Optional[dict] = None):
    header = {"kind": "volume", "dims": list(volume.dims), "origin_mm": list(volume.origin),
              "spacing_mm": list(volume.spacing), "order": "x-fastest"}
    header.update(extra or {})
    write_array(path, np.asarray(volume.data).ravel(order="F"), header)


def load_volume(path) -> DensityVolume:
    header, flat = read_array(path)
    if header.get("kind") != "volume":
        raise FileFormatError(f"{path}: not a volume file")
    dims = tuple(int(d) for d in header["dims"])
    if flat.size != int(np.prod(dims)):
        raise FileFormatError(f"{path}: payload has {flat.size} values, header promises {dims}")
    return DensityVolume(flat.reshape(dims, order="F"), header["origin_mm"], header["spacing_mm"])


def save_image(path, image: np.ndarray, extra: Optional[dict] = None):
    """2D image indexed [v, u]; stored u-fastest with dims [W, H]."""
    image = np.asarray(image)
    header = {"kind": "projection", "dims": [image.shape[1], image.shape[0]], "order": "x-fastest"}
    header.update(extra or {})
    write_array(path, image.ravel(order="C"), header)


def load_image(path) -> Tuple[dict, np.ndarray]:
    header, flat = read_array(path)
    if header.get("kind") != "projection":
        raise FileFormatError(f"{path}: not a projection file")
    w, h = (int(d) for d in header["dims"])
    if flat.size != w * h:
        raise FileFormatError(f"{path}: payload size does not match dims")
    return header, flat.reshape(h, w)


def save_cloud(path, cloud: GaussianCloud, extra: Optional[dict] = None):
    """Kernel parameters only, one row of ``CLOUD_FIELDS`` per kernel."""
    rows = np.concatenate([cloud.rho_raw[:, None], cloud.position, cloud.s_raw, cloud.q_raw], axis=1)
    header = {
        "kind": "cloud",
        "count": len(cloud),
        "fields": list(CLOUD_FIELDS),
        "density_activation": DENSITY_ACTIVATION,
        "scale_activation": SCALE_ACTIVATION,
        "s_min_mm": cloud.s_min,
    }
    header.update(extra or {})
    write_array(path, rows.ravel(), header)


def load_cloud(path) -> Tuple[GaussianCloud, dict]:
    header, flat = read_array(path)
    if header.get("kind") != "cloud":
        raise FileFormatError(f"{path}: not a cloud checkpoint")
    if header.get("fields") != list(CLOUD_FIELDS):
        raise FileFormatError(f"{path}: unexpected field layout")
    if header.get("density_activation") != DENSITY_ACTIVATION or header.get("scale_activation") != SCALE_ACTIVATION:
        raise FileFormatError(f"{path}: checkpoint uses different activations")
    m = int(header["count"])
    if flat.size != m * len(CLOUD_FIELDS):
        raise FileFormatError(f"{path}: payload size does not match count")
    rows = flat.reshape(m, len(CLOUD_FIELDS))
    cloud = GaussianCloud(rows[:, 0], rows[:, 1:4], rows[:, 4:7], rows[:, 7:11], float(header["s_min_mm"]))
    return cloud, header


def write_png(path, image: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None):
    """8-bit grayscale PNG with linear windowing to [lo, hi] (defaults: image min/max)."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if lo is None else float(lo)
    hi = float(image.max()) if hi is None else float(hi)
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    Image.fromarray(np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)).save(path)
