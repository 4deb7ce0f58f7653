"""Optimisation loop: per-view rendering loss, TV-regularised density, Adam, adaptive control."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import io
from .errors import DivergenceDetected
from .fdk import FILTERS
from .gaussians import PARAM_GROUPS, GaussianCloud, inverse_softplus, quaternion_to_rotation, softplus
from .geometry import ScannerConfig
from .objectives import psnr_3d, total_loss
from .rasterizer import LOWPASS_PX, MODES, integration_factor, project, render, render_backward
from .voxelizer import DensityVolume, GridSpec, random_subvolume_spec, voxelize, voxelize_backward

__all__ = [
    "TrainConfig",
    "Adam",
    "learning_rate",
    "train",
    "adaptive_control",
    "clone_kernels",
    "split_kernels",
    "halve_density",
    "extract_volume",
    "recovered_densities",
]


class TrainConfig(BaseModel):
    """Optimisation hyperparameters.

    Learning rates are per parameter group. The position rate is multiplied by
    the largest side of the reconstruction box (mm) when
    ``position_lr_scaled_by_extent`` is set, so it is expressed in box units.
    """

    model_config = ConfigDict(extra="forbid")

    iters: int = Field(30000, ge=1)
    lr_position: float = Field(0.0002, ge=0)
    lr_density: float = Field(0.01, ge=0)
    lr_scale: float = Field(0.005, ge=0)
    lr_rotation: float = Field(0.001, ge=0)
    lr_final_ratio: float = Field(0.1, gt=0)
    position_lr_scaled_by_extent: bool = True
    lambda_ssim: float = Field(0.25, ge=0)
    lambda_tv: float = Field(0.05, ge=0)
    tv_D: int = Field(32, ge=2)
    densify_from_iter: int = Field(500, ge=0)
    densify_until_iter: int = Field(15000, ge=0)
    densify_interval: int = Field(100, ge=1)
    densify_grad_threshold: float = Field(0.00005, ge=0)
    prune_density_threshold: float = Field(0.005, ge=0)
    split_factor: float = Field(1.6, gt=1)
    split_scale_fraction: float = Field(0.01, ge=0)
    max_kernels: Optional[int] = Field(None, ge=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-15, gt=0)
    mode: str = "rectified"
    lowpass_px: float = Field(LOWPASS_PX, ge=0)
    freeze_jacobian: bool = False
    seed: int = 0
    init: str = "fdk"
    init_count: int = Field(50000, ge=1)
    init_tau: float = Field(0.05, ge=0)
    init_k: float = Field(0.15, gt=0)
    fdk_window: str = "hann"
    output_dims: Tuple[int, int, int] = (64, 64, 64)
    history_interval: int = Field(100, ge=1)
    eval_interval: int = Field(0, ge=0)
    checkpoint_interval: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.init not in ("fdk", "random"):
            raise ValueError("init must be 'fdk' or 'random'")
        if self.fdk_window not in FILTERS:
            raise ValueError(f"fdk_window must be one of {FILTERS}")
        if not 0 <= self.densify_from_iter <= self.densify_until_iter <= self.iters:
            raise ValueError("adaptive window must satisfy 0 <= densify_from_iter <= densify_until_iter <= iters")
        return self

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down schedule for 64^3 volumes and 128^2 projections on one CPU core.

        The schedule is shortened to 4000 iterations with densification in the
        first half, the TV cube shrinks with the output grid, and the kernel
        budget is capped at 16000.
        """
        base = dict(
            iters=4000,
            densify_from_iter=50,
            densify_until_iter=2000,
            densify_interval=100,
            tv_D=16,
            init_count=8000,
            max_kernels=16000,
            history_interval=50,
        )
        base.update(overrides)
        return cls(**base)

    def base_lr(self, group: str, extent_side: float = 1.0) -> float:
        lr = getattr(self, "lr_" + group)
        if group == "position" and self.position_lr_scaled_by_extent:
            lr *= extent_side
        return lr


def learning_rate(config: TrainConfig, group: str, t: int, extent_side: float = 1.0) -> float:
    """Exponential decay from the initial rate at t=0 to ``lr_final_ratio`` times it at t=iters."""
    return config.base_lr(group, extent_side) * config.lr_final_ratio ** (t / config.iters)


class Adam:
    """Adam over the raw parameter groups of a cloud; moments live on the cloud."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0

    def step(self, cloud: GaussianCloud, grads, lrs: Dict[str, float]):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for group in PARAM_GROUPS:
            g = grads.group(group)
            m = cloud.exp_avg[group]
            v = cloud.exp_avg_sq[group]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            cloud.set_param(group, cloud.param(group) - lrs[group] * update)
        cloud.q_raw = cloud.q_raw / np.linalg.norm(cloud.q_raw, axis=1, keepdims=True)


# adaptive control


def halve_density(rho_raw: np.ndarray) -> np.ndarray:
    return inverse_softplus(np.maximum(0.5 * softplus(rho_raw), 1e-300))


def clone_kernels(cloud: GaussianCloud, index, shift: Optional[np.ndarray] = None) -> GaussianCloud:
    """Duplicate kernels ``index``; parents and copies each keep half the density.

    ``shift`` (n, 3) displaces the copies; None keeps them co-located. Copies
    start with zeroed optimiser state.
    """
    index = np.asarray(index)
    out = cloud.copy()
    out.rho_raw[index] = halve_density(cloud.rho_raw[index])
    child = out.select(index).params_only()
    if shift is not None:
        child.position = child.position + shift
    out = out.concat(child)
    out.reset_densify_stats()
    return out


def split_kernels(cloud: GaussianCloud, index, factor: float, rng: np.random.Generator, n_children: int = 2
                  ) -> GaussianCloud:
    """Replace kernels ``index`` by children drawn from the parent Gaussian.

    Children have scales divided by ``factor`` and density ``rho / n_children``.
    """
    index = np.asarray(index)
    parents = cloud.select(index)
    n = len(parents)
    rep = np.repeat(np.arange(n), n_children)
    scale = parents.scale[rep]
    rot = quaternion_to_rotation(parents.rotation)[rep]
    offset = np.einsum("nij,nj->ni", rot, rng.standard_normal((len(rep), 3)) * scale)
    child_density = softplus(parents.rho_raw[rep]) / n_children
    children = GaussianCloud.from_activated(
        child_density, parents.position[rep] + offset, np.maximum(scale / factor, 1.001 * cloud.s_min), parents.rotation[rep], s_min=cloud.s_min
    )
    keep = np.ones(len(cloud), dtype=bool)
    keep[index] = False
    out = cloud.select(keep).concat(children)
    out.reset_densify_stats()
    return out


def adaptive_control(cloud: GaussianCloud, config: TrainConfig, extent_side: float, rng: np.random.Generator
                     ) -> Tuple[GaussianCloud, dict]:
    """Densify kernels with large mean screen-space gradient, then prune near-empty ones.

    Small kernels (largest scale <= ``split_scale_fraction * extent_side``) are
    cloned and shifted against their accumulated 3D positional gradient; larger
    ones are split. Both halve the density so the rendered mass is unchanged.
    Pruning looks at density only, never at size.
    """
    count = cloud.grad2d_count
    mean_grad = np.where(count > 0, cloud.grad2d_accum / np.maximum(count, 1), 0.0)
    candidates = np.flatnonzero(mean_grad > config.densify_grad_threshold)
    if config.max_kernels is not None:
        room = max(config.max_kernels - len(cloud), 0)
        if candidates.size > room:
            # keep the strongest; stable sort keeps ties in index order
            order = np.argsort(-mean_grad[candidates], kind="stable")
            candidates = np.sort(candidates[order[:room]])
    small = cloud.scale[candidates].max(axis=1) <= config.split_scale_fraction * extent_side
    clone_idx = candidates[small]
    split_idx = candidates[~small]

    n_before = len(cloud)
    out = cloud
    if clone_idx.size:
        g = cloud.grad3d_accum[clone_idx]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norm > 0, -g / np.where(norm > 0, norm, 1.0), 0.0)
        shift = direction * cloud.scale[clone_idx].mean(axis=1, keepdims=True)
        out = clone_kernels(out, clone_idx, shift)
    if split_idx.size:
        # clones were appended, so the split indices are unchanged
        out = split_kernels(out, split_idx, config.split_factor, rng)
    empty = out.density < config.prune_density_threshold
    if np.all(empty):
        empty[np.argmax(out.density)] = False
    if np.any(empty):
        out = out.select(~empty)
    out.reset_densify_stats()
    stats = {"cloned": int(clone_idx.size), "split": int(split_idx.size), "pruned": int(empty.sum()),
             "before": n_before, "after": len(out)}
    return out, stats


# volumes


def extract_volume(cloud: GaussianCloud, grid: GridSpec, mode: str = "rectified",
                   scanner: Optional[ScannerConfig] = None, reference_view: int = 0) -> DensityVolume:
    """Voxelize the cloud as a density volume.

    In biased mode the stored densities are projected peak values, so each is
    divided by its integration factor at ``reference_view`` first.
    """
    if mode == "biased":
        if scanner is None:
            raise ValueError("biased-mode extraction needs the scanner geometry")
        mu = integration_factor(cloud, scanner, scanner.angles[reference_view])
        cloud = cloud.params_only()
        cloud.rho_raw = inverse_softplus(np.maximum(softplus(cloud.rho_raw) / mu, 1e-300))
    return voxelize(cloud, grid)


def recovered_densities(cloud: GaussianCloud, scanner: ScannerConfig, index: int, mode: str,
                        lowpass: float = LOWPASS_PX) -> np.ndarray:
    """Per-view 3D density implied by one kernel's rendered centre value: rho_hat / mu_view."""
    single = cloud.select([index]).params_only()
    out = []
    for theta in scanner.angles:
        proj = project(single, scanner, theta, mode, lowpass)
        out.append(proj.amplitude[0] / proj.lowpass_gain[0] / proj.mu[0])
    return np.asarray(out)


# training


def _extent_side(scanner: ScannerConfig) -> float:
    return float(max(scanner.volume_extent))


def train(
    cloud: GaussianCloud,
    projections,
    config: TrainConfig,
    grid: Optional[GridSpec] = None,
    ground_truth: Optional[np.ndarray] = None,
    deterministic: bool = False,
    history_path=None,
    checkpoint_dir=None,
    log: Optional[Callable[[dict], None]] = None,
) -> Tuple[GaussianCloud, List[dict]]:
    """Fit ``cloud`` to ``projections``.

    Parameters
    ----------
    cloud : GaussianCloud
        Initial kernels; not modified.
    projections : ProjectionSet
    config : TrainConfig
    grid : GridSpec, optional
        Output grid; its spacing is used for the TV sub-volumes. Defaults to
        ``config.output_dims`` covering the scanner's reconstruction box.
    ground_truth : array, optional
        Reference volume on ``grid``; enables PSNR entries in the history
        every ``eval_interval`` iterations.
    deterministic : bool
        Omit wall-clock times from the history so reruns are byte-identical.

    Returns
    -------
    cloud, history
    """
    scanner = projections.scanner
    grid = GridSpec.covering(scanner.volume_extent, config.output_dims) if grid is None else grid
    images = projections.images
    data_range = float(images.max()) if images.max() > 0 else 1.0
    extent_side = _extent_side(scanner)
    rng = np.random.default_rng(config.seed)
    cloud = cloud.params_only()
    adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    history: List[dict] = []
    hist_fh = open(history_path, "w") if history_path is not None else None
    start = time.perf_counter()
    order: List[int] = []

    def emit(record):
        history.append(record)
        if hist_fh is not None:
            hist_fh.write(json.dumps(record, sort_keys=True) + "\n")
            hist_fh.flush()
        if log is not None:
            log(record)

    try:
        for t in range(1, config.iters + 1):
            if not order:
                order = list(rng.permutation(len(images)))
            view = int(order.pop(0))
            theta = scanner.angles[view]
            fwd = render(cloud, scanner, theta, config.mode, config.lowpass_px)

            sub_vol = sub_state = sub_grid = None
            if config.lambda_tv > 0:
                sub_grid = random_subvolume_spec(scanner.extent_min, scanner.extent_max, config.tv_D,
                                                 grid.spacing, rng)
                sub_vol, sub_state = voxelize(cloud, sub_grid, return_state=True)
            terms = total_loss(fwd.image, images[view], None if sub_vol is None else sub_vol.data,
                               config.lambda_ssim, config.lambda_tv, data_range)
            if not math.isfinite(terms.total):
                raise DivergenceDetected(
                    f"non-finite loss at iteration {t} (view {view}, {len(cloud)} kernels, "
                    f"l1={terms.l1}, dssim={terms.dssim}, tv={terms.tv})"
                )

            grads = render_backward(cloud, scanner, theta, terms.grad_image, config.mode, config.lowpass_px,
                                    forward=fwd, freeze_jacobian=config.freeze_jacobian)
            if sub_state is not None:
                grads = grads + voxelize_backward(cloud, sub_grid, terms.grad_volume, state=sub_state)

            visible = fwd.projection.visible
            cloud.grad2d_accum[visible] += np.linalg.norm(grads.means2d[visible], axis=1)
            cloud.grad2d_count[visible] += 1
            cloud.grad3d_accum += grads.position

            lrs = {g: learning_rate(config, g, t, extent_side) for g in PARAM_GROUPS}
            adam.step(cloud, grads, lrs)

            control = None
            if config.densify_from_iter <= t <= config.densify_until_iter and t % config.densify_interval == 0:
                cloud, control = adaptive_control(cloud, config, extent_side, rng)

            if t % config.history_interval == 0 or t == config.iters or t == 1:
                record = {"iter": t, "loss": terms.total, "l1": terms.l1, "dssim": terms.dssim, "tv": terms.tv,
                          "n_kernels": len(cloud), "view": view, "lr": lrs}
                if control is not None:
                    record["adaptive_control"] = control
                if ground_truth is not None and config.eval_interval and (
                        t % config.eval_interval == 0 or t == config.iters):
                    vol = extract_volume(cloud, grid, config.mode, scanner)
                    record["psnr_3d"] = psnr_3d(vol.data, ground_truth)
                if not deterministic:
                    record["wall_time_s"] = time.perf_counter() - start
                emit(record)

            if checkpoint_dir is not None and config.checkpoint_interval and t % config.checkpoint_interval == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                io.save_cloud(Path(checkpoint_dir) / f"cloud_{t:06d}.bin", cloud,
                              {"iter": t, "train_config": config.model_dump(mode="json")})
    finally:
        if hist_fh is not None:
            hist_fh.close()
    return cloud, history
