"""Command-line entry point: ``xraysplat <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import ConfigError, DataError, DivergenceDetected, InverseOutOfDomain
from .geometry import ScannerConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

PRESET_VIEWS = {"sparse25": 25, "sparse50": 50, "sparse75": 75}


def _say(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _load_scanner(args) -> ScannerConfig:
    if args.config:
        return ScannerConfig.from_dict(io.read_json(args.config))
    n_views = PRESET_VIEWS[args.preset] if args.preset else args.views
    return ScannerConfig.desk(n_views=n_views, detector_pixels=args.detector_pixels, volume_side=args.volume_side)


def _load_train_config(path, overrides: dict):
    from pydantic import ValidationError

    from .io import validation_error_to_config_error
    from .trainer import TrainConfig

    data = io.read_json(path) if path else {}
    preset = data.pop("preset", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        if preset == "desk":
            return TrainConfig.desk(**data)
        if preset not in (None, "full"):
            raise ConfigError(f"unknown preset {preset!r} (use 'full' or 'desk')", key="preset")
        return TrainConfig(**data)
    except ValidationError as exc:
        raise validation_error_to_config_error(exc) from None


def _set_threads(n):
    from . import _tiles

    _tiles.set_threads(n)


# commands


def cmd_simulate(args) -> int:
    from .simulator import phantom_from_file, phantom_shepp_logan_3d, simulate

    scanner = _load_scanner(args)
    _set_threads(args.threads)
    if args.phantom == "shepp-logan":
        volume = phantom_shepp_logan_3d(args.dims, extent=scanner.volume_extent)
    else:
        volume = phantom_from_file(args.phantom)
    I0 = None if args.clean else args.i0
    _say(f"simulate: {scanner.n_views} views, {scanner.width}x{scanner.height} px, seed {args.seed}, "
         f"I0={I0}, gauss_sigma={args.gauss_sigma}")
    projections = simulate(volume, scanner, I0=I0, gauss_sigma=args.gauss_sigma, seed=args.seed, step=args.step)
    out = Path(args.out)
    projections.save(out, {"command": "simulate", "phantom": args.phantom, "phantom_dims": list(volume.dims),
                            "step_mm": args.step, "version": __version__})
    io.save_volume(out / "ground_truth.bin", volume)
    print(json.dumps({"out": str(out), "seed": args.seed, "views": scanner.n_views}))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .fdk import fdk_reconstruct, random_init_cloud, sample_init_cloud
    from .simulator import ProjectionSet
    from .trainer import extract_volume, train
    from .voxelizer import GridSpec

    overrides = {"mode": args.mode, "init": args.init, "seed": args.seed, "iters": args.iters}
    config = _load_train_config(args.train_config, overrides)
    _set_threads(args.threads)
    projections = ProjectionSet.load(args.projections)
    scanner = projections.scanner
    grid = GridSpec.covering(scanner.volume_extent, config.output_dims)
    resolved = config.model_dump(mode="json")
    _say("reconstruct: resolved settings " + json.dumps(resolved, sort_keys=True))

    rng = np.random.default_rng(config.seed)
    if config.init == "fdk":
        coarse = fdk_reconstruct(projections, grid, window=config.fdk_window)
        cloud = sample_init_cloud(coarse, config.init_count, config.init_tau, config.init_k, rng)
    else:
        cloud = random_init_cloud(scanner.extent_min, scanner.extent_max, config.init_count, rng)

    gt = None
    gt_path = Path(args.projections) / "ground_truth.bin"
    if args.ground_truth:
        gt_path = Path(args.ground_truth)
    if gt_path.exists() and config.eval_interval:
        ref = io.load_volume(gt_path)
        if ref.dims == grid.dims:
            gt = ref.data

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud, history = train(
        cloud, projections, config, grid, ground_truth=gt, deterministic=args.deterministic,
        history_path=out / "history.jsonl", checkpoint_dir=out / "checkpoints",
        log=lambda r: _say(f"iter {r['iter']}: loss {r['loss']:.5f}, kernels {r['n_kernels']}"),
    )
    volume = extract_volume(cloud, grid, config.mode, scanner)
    io.save_volume(out / "volume.bin", volume)
    io.save_cloud(out / "cloud.bin", cloud, {"train_config": resolved})
    io.write_json(out / "manifest.json", {
        "command": "reconstruct",
        "projections": str(args.projections),
        "train_config": resolved,
        "deterministic": bool(args.deterministic),
        "version": __version__,
        "outputs": ["volume.bin", "cloud.bin", "history.jsonl"],
    })
    print(json.dumps({"out": str(out), "kernels": len(cloud), "final_loss": history[-1]["loss"]}))
    return EXIT_OK


def cmd_fdk(args) -> int:
    from .fdk import fdk_reconstruct
    from .simulator import ProjectionSet
    from .voxelizer import GridSpec

    projections = ProjectionSet.load(args.projections)
    grid = GridSpec.covering(projections.scanner.volume_extent, args.dims)
    volume = fdk_reconstruct(projections, grid, window=args.window)
    io.save_volume(args.out, volume, {"window": args.window})
    print(json.dumps({"out": str(args.out)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .errors import DimMismatch
    from .objectives import psnr_3d, ssim_slices

    vol = io.load_volume(args.volume)
    ref = io.load_volume(args.reference)
    if vol.dims != ref.dims:
        raise DimMismatch(f"volume dims {vol.dims} differ from reference dims {ref.dims}")
    record = io.MetricsRecord(
        volume=str(args.volume), reference=str(args.reference),
        psnr_db=psnr_3d(vol.data, ref.data), ssim=ssim_slices(vol.data, ref.data), dims=vol.dims,
    )
    line = record.model_dump_json()
    if args.out:
        with open(args.out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_export_slices(args) -> int:
    vol = io.load_volume(args.volume)
    axis = "xyz".index(args.axis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = np.moveaxis(vol.data, axis, 0)
    for i, sl in enumerate(data):
        # transpose so image rows follow the second remaining axis
        io.write_png(out / f"slice_{args.axis}_{i:04d}.png", sl.T, args.window_min, args.window_max)
    io.write_json(out / "manifest.json", {"command": "export-slices", "volume": str(args.volume), "axis": args.axis,
                                          "window": [args.window_min, args.window_max], "slices": int(data.shape[0])})
    print(json.dumps({"out": str(out), "slices": int(data.shape[0])}))
    return EXIT_OK


def cmd_render(args) -> int:
    from .rasterizer import render

    cloud, _ = io.load_cloud(args.cloud)
    scanner = ScannerConfig.from_dict(io.read_json(args.config))
    img = render(cloud, scanner, args.theta, args.mode).image
    io.save_image(args.out, img, {"theta_rad": args.theta, "mode": args.mode})
    if args.png:
        io.write_png(args.png, img)
    print(json.dumps({"out": str(args.out)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Rectified vs biased training on the same data; reports both volumes' metrics."""
    from .fdk import fdk_reconstruct, sample_init_cloud
    from .objectives import psnr_3d, ssim_slices
    from .simulator import ProjectionSet
    from .trainer import extract_volume, recovered_densities, train

    base = _load_train_config(args.train_config, {"seed": args.seed, "iters": args.iters})
    _set_threads(args.threads)
    projections = ProjectionSet.load(args.projections)
    ref = io.load_volume(Path(args.projections) / "ground_truth.bin")
    grid = ref.grid
    coarse = fdk_reconstruct(projections, grid, window=base.fdk_window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for mode in ("rectified", "biased"):
        config = base.model_copy(update={"mode": mode})
        cloud = sample_init_cloud(coarse, config.init_count, config.init_tau, config.init_k,
                                  np.random.default_rng(config.seed))
        cloud, _ = train(cloud, projections, config, grid, deterministic=args.deterministic,
                         history_path=out / f"history_{mode}.jsonl")
        vol = extract_volume(cloud, grid, mode, projections.scanner)
        io.save_volume(out / f"volume_{mode}.bin", vol)
        # per-view density implied by the heaviest kernel; a view-consistent model gives a flat profile
        probe = int(np.argmax(cloud.density))
        per_view = recovered_densities(cloud, projections.scanner, probe, mode, config.lowpass_px)
        results[mode] = {"psnr_db": psnr_3d(vol.data, ref.data), "ssim": ssim_slices(vol.data, ref.data),
                         "probe_kernel": probe, "probe_spread": float(np.ptp(per_view) / np.mean(per_view)),
                         "kernels": len(cloud)}
    results["fdk"] = {"psnr_db": psnr_3d(coarse.data, ref.data), "ssim": ssim_slices(coarse.data, ref.data)}
    io.write_json(out / "ablation.json", results)
    io.write_json(out / "manifest.json", {"command": "ablate", "projections": str(args.projections),
                                          "train_config": base.model_dump(mode="json"),
                                          "deterministic": bool(args.deterministic), "version": __version__})
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


# argument parsing


def _add_common(p):
    p.add_argument("--threads", type=int, default=0, help="worker threads for tile kernels (0 = all cores)")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed-order reductions and no wall-clock fields, for byte-identical reruns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xraysplat", description="Sparse-view cone-beam CT with radiative Gaussians")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate noisy projections of a phantom")
    p.add_argument("--config", help="scanner config JSON (overrides the preset/desk geometry)")
    p.add_argument("--preset", choices=sorted(PRESET_VIEWS), help="desk geometry with 25, 50 or 75 views")
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--detector-pixels", type=int, default=128)
    p.add_argument("--volume-side", type=float, default=16.0, help="reconstruction box side in mm")
    p.add_argument("--phantom", default="shepp-logan", help="'shepp-logan' or a volume/.npy file")
    p.add_argument("--dims", type=int, default=64, help="phantom grid size per axis")
    p.add_argument("--i0", type=float, default=1e5, help="incident photon count")
    p.add_argument("--gauss-sigma", type=float, default=10.0, help="readout noise std in counts")
    p.add_argument("--clean", action="store_true", help="skip the noise model")
    p.add_argument("--step", type=float, default=None, help="ray-marching step in mm (default half a voxel)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="fit Gaussians to a projection set")
    p.add_argument("projections")
    p.add_argument("--train-config", help="TrainConfig JSON; {\"preset\": \"desk\"} selects the small schedule")
    p.add_argument("--mode", choices=["rectified", "biased"], default=None)
    p.add_argument("--init", choices=["fdk", "random"], default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ground-truth", help="reference volume for PSNR in the history")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fdk", help="analytic FDK reconstruction")
    p.add_argument("projections")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--window", choices=["hann", "ram-lak"], default="hann")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fdk)

    p = sub.add_parser("evaluate", help="PSNR and slice-averaged SSIM against a reference volume")
    p.add_argument("volume")
    p.add_argument("reference")
    p.add_argument("--out", help="append the JSON record to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-slices", help="write every slice along an axis as PNG")
    p.add_argument("volume")
    p.add_argument("--axis", choices=["x", "y", "z"], default="z")
    p.add_argument("--window-min", type=float, default=0.0)
    p.add_argument("--window-max", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_slices)

    p = sub.add_parser("render", help="render a cloud checkpoint at one angle")
    p.add_argument("cloud")
    p.add_argument("--config", required=True, help="scanner config JSON")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--mode", choices=["rectified", "biased"], default="rectified")
    p.add_argument("--png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="train rectified and biased modes on the same projections")
    p.add_argument("projections", help="directory written by 'simulate' (needs ground_truth.bin)")
    p.add_argument("--train-config")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceDetected as exc:
        _say(f"diverged: {exc}")
        return EXIT_DIVERGED
    except (DataError, InverseOutOfDomain, FileNotFoundError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
