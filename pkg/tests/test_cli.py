import json
from pathlib import Path

import numpy as np
import pytest

from xraysplat import io
from xraysplat.cli import main
from xraysplat.geometry import ScannerConfig

SMALL_SIM = ["--views", "4", "--detector-pixels", "32", "--dims", "16"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "p"
    assert main(["simulate", *SMALL_SIM, "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def train_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.json"
    path.write_text(json.dumps({"iters": 20, "densify_from_iter": 5, "densify_until_iter": 15,
                                "densify_interval": 5, "init_count": 150, "tv_D": 4, "output_dims": [16, 16, 16],
                                "history_interval": 5}))
    return path


def file_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).rglob("*")) if p.is_file()}


class TestSimulate:
    def test_outputs(self, sim_dir):
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert len(manifest["files"]) == 4
        assert manifest["noise"] == {"I0": 100000.0, "gauss_sigma": 10.0, "seed": 3}
        assert (sim_dir / "ground_truth.bin").exists()

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        out = tmp_path / "again"
        assert main(["simulate", *SMALL_SIM, "--seed", "3", "--out", str(out)]) == 0
        assert file_bytes(out) == file_bytes(sim_dir)

    @pytest.mark.parametrize("preset,views", [("sparse25", 25), ("sparse50", 50), ("sparse75", 75)])
    def test_presets(self, tmp_path, preset, views):
        out = tmp_path / preset
        assert main(["simulate", "--preset", preset, "--detector-pixels", "16", "--dims", "16", "--clean",
                     "--out", str(out)]) == 0
        assert len(json.loads((out / "manifest.json").read_text())["files"]) == views

    def test_bad_config_names_key(self, tmp_path, capsys):
        cfg = ScannerConfig.desk(n_views=4, detector_pixels=32).to_dict()
        cfg["source_to_detector_mm"] = "far"
        (tmp_path / "s.json").write_text(json.dumps(cfg))
        code = main(["simulate", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "source_to_detector_mm" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = ScannerConfig.desk(n_views=4, detector_pixels=32).to_dict()
        cfg["detector_pixel"] = 3
        (tmp_path / "s.json").write_text(json.dumps(cfg))
        assert main(["simulate", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 2
        assert "detector_pixel" in capsys.readouterr().err

    def test_missing_phantom_file(self, tmp_path):
        assert main(["simulate", *SMALL_SIM, "--phantom", str(tmp_path / "none.npy"),
                     "--out", str(tmp_path / "o")]) == 3


class TestReconstruct:
    def test_deterministic_rerun(self, sim_dir, train_config, tmp_path):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["reconstruct", str(sim_dir), "--train-config", str(train_config), "--deterministic",
                         "--out", str(out)]) == 0
            runs.append(file_bytes(out))
        assert runs[0].keys() >= {"volume.bin", "cloud.bin", "history.jsonl", "manifest.json"}
        assert runs[0] == runs[1]

    def test_mode_and_init_flags(self, sim_dir, train_config, tmp_path):
        out = tmp_path / "b"
        assert main(["reconstruct", str(sim_dir), "--train-config", str(train_config), "--mode", "biased",
                     "--init", "random", "--iters", "15", "--out", str(out)]) == 0
        resolved = json.loads((out / "manifest.json").read_text())["train_config"]
        assert (resolved["mode"], resolved["init"], resolved["iters"]) == ("biased", "random", 15)

    def test_bad_train_config(self, sim_dir, tmp_path, capsys):
        (tmp_path / "t.json").write_text(json.dumps({"lr_densty": 0.1}))
        assert main(["reconstruct", str(sim_dir), "--train-config", str(tmp_path / "t.json"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "lr_densty" in capsys.readouterr().err

    def test_missing_projections(self, tmp_path):
        assert main(["reconstruct", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 3


class TestEvaluateAndExport:
    def test_identical(self, sim_dir, tmp_path, capsys):
        gt = str(sim_dir / "ground_truth.bin")
        assert main(["evaluate", gt, gt, "--out", str(tmp_path / "m.jsonl")]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["psnr_db"] == 100.0
        assert record["ssim"] == pytest.approx(1.0, abs=1e-12)
        io.MetricsRecord.model_validate_json((tmp_path / "m.jsonl").read_text().strip())

    def test_dims_mismatch(self, sim_dir, tmp_path):
        other = tmp_path / "v.bin"
        from xraysplat.voxelizer import DensityVolume
        io.save_volume(other, DensityVolume(np.zeros((16, 16, 17)), (0, 0, 0), (1, 1, 1)))
        assert main(["evaluate", str(other), str(sim_dir / "ground_truth.bin")]) == 3

    @pytest.mark.parametrize("axis", ["x", "z"])
    def test_slice_count(self, sim_dir, tmp_path, axis):
        out = tmp_path / axis
        assert main(["export-slices", str(sim_dir / "ground_truth.bin"), "--axis", axis, "--out", str(out)]) == 0
        assert len(list(out.glob("*.png"))) == 16

    def test_fdk_and_render(self, sim_dir, tmp_path):
        assert main(["fdk", str(sim_dir), "--dims", "16", "16", "16", "--out", str(tmp_path / "f.bin")]) == 0
        assert io.load_volume(tmp_path / "f.bin").dims == (16, 16, 16)
        from conftest import random_cloud
        io.save_cloud(tmp_path / "c.bin", random_cloud(np.random.default_rng(0), 5))
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps(ScannerConfig.desk(n_views=4, detector_pixels=32).to_dict()))
        assert main(["render", str(tmp_path / "c.bin"), "--config", str(cfg), "--theta", "0.3",
                     "--png", str(tmp_path / "r.png"), "--out", str(tmp_path / "r.bin")]) == 0
        _, img = io.load_image(tmp_path / "r.bin")
        assert img.shape == (32, 32) and img.max() > 0
