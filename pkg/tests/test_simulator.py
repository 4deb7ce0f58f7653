import math

import numpy as np
import pytest

from xraysplat import io
from xraysplat.errors import DataError, FileFormatError
from xraysplat.geometry import ScannerConfig
from xraysplat.simulator import (
    SHEPP_LOGAN_ELLIPSOIDS,
    ProjectionSet,
    add_noise,
    phantom_from_file,
    phantom_shepp_logan_3d,
    project_volume,
    simulate,
)
from xraysplat.voxelizer import DensityVolume, GridSpec


@pytest.fixture(scope="module")
def scanner129():
    return ScannerConfig.desk(n_views=4, detector_pixels=129)


class TestPhantom:
    def test_range(self):
        vol = phantom_shepp_logan_3d(32)
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0
        assert vol.data.max() == pytest.approx(1.0)

    def test_central_voxel(self):
        # the origin lies inside the outer shell (1.0) and the brain (-0.8) only:
        # the tilted pair is centred at x = +/-0.22 with x semi-axes 0.11 / 0.16,
        # the remaining ellipsoids sit at |y| >= 0.1 with smaller y semi-axes
        vol = phantom_shepp_logan_3d(65)
        assert vol.data[32, 32, 32] == pytest.approx(0.2, abs=1e-12)

    def test_mirror_symmetry(self):
        # shell, brain and the three upper ellipsoids are centred on x = 0 and untilted
        vol = phantom_shepp_logan_3d(48, table=SHEPP_LOGAN_ELLIPSOIDS[[0, 1, 4, 5, 6]])
        np.testing.assert_array_equal(vol.data, vol.data[::-1, :, :])

    def test_mirrored_table_mirrors_volume(self):
        table = SHEPP_LOGAN_ELLIPSOIDS.copy()
        table[:, 4] *= -1  # x0
        table[:, 7] *= -1  # rotation about z
        a = phantom_shepp_logan_3d(48).data
        b = phantom_shepp_logan_3d(48, table=table).data
        assert np.mean(a != b[::-1, :, :]) < 1e-3

    def test_min_dims(self):
        with pytest.raises(ValueError):
            phantom_shepp_logan_3d(8)

    def test_from_file_normalizes(self, tmp_path, rng):
        arr = rng.uniform(-3, 5, (16, 16, 16))
        np.save(tmp_path / "v.npy", arr)
        vol = phantom_from_file(tmp_path / "v.npy")
        assert vol.data.min() == 0.0 and vol.data.max() == 1.0
        io.save_volume(tmp_path / "v.bin", DensityVolume(arr, (0, 0, 0), (0.5, 0.5, 0.5)))
        vol2 = phantom_from_file(tmp_path / "v.bin")
        assert vol2.spacing == (0.5, 0.5, 0.5)
        np.testing.assert_allclose(vol2.data, vol.data, atol=1e-6)

    def test_from_file_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x01\x02")
        with pytest.raises(FileFormatError):
            phantom_from_file(tmp_path / "bad.bin")
        np.save(tmp_path / "flat.npy", np.zeros((4, 4)))
        with pytest.raises(FileFormatError):
            phantom_from_file(tmp_path / "flat.npy")


class TestProjector:
    def test_zero_volume(self, scanner129):
        vol = DensityVolume.on(GridSpec.covering(16.0, 16), np.zeros((16, 16, 16)))
        assert not project_volume(vol, scanner129, 0.3).any()

    @pytest.mark.parametrize("theta", [0.0, math.pi / 4, 1.0])
    def test_uniform_chord(self, scanner129, theta):
        vol = DensityVolume.on(GridSpec.covering(16.0, 16), np.full((16, 16, 16), 0.7))
        # the central ray crosses the cube through its centre in the z = 0 plane
        chord = 16.0 / max(abs(math.cos(theta)), abs(math.sin(theta)))
        value = project_volume(vol, scanner129, theta)[64, 64]
        assert value == pytest.approx(0.7 * chord, rel=1e-3)

    def test_linear(self, scanner129, rng):
        grid = GridSpec.covering(16.0, 16)
        a = DensityVolume.on(grid, rng.uniform(size=(16, 16, 16)))
        b = DensityVolume.on(grid, rng.uniform(size=(16, 16, 16)))
        ab = DensityVolume.on(grid, a.data + 2 * b.data)
        np.testing.assert_allclose(project_volume(ab, scanner129, 0.5),
                                   project_volume(a, scanner129, 0.5) + 2 * project_volume(b, scanner129, 0.5),
                                   atol=1e-10)

    def test_step_convergence(self):
        scanner = ScannerConfig.desk(n_views=1, detector_pixels=32)
        vol = phantom_shepp_logan_3d(32)
        p1, p2, p3 = (project_volume(vol, scanner, 0.4, step=h) for h in (0.25, 0.125, 0.0625))
        d12 = np.abs(p1 - p2).max()
        d23 = np.abs(p2 - p3).max()
        assert d23 < d12
        assert d23 < 1e-2 * p3.max()

    def test_clean_projections_nonnegative(self, scanner129):
        vol = phantom_shepp_logan_3d(16)
        assert project_volume(vol, scanner129, 2.0).min() >= 0.0


class TestNoise:
    def test_zero_attenuation_std(self):
        rng = np.random.default_rng(0)
        I0, sigma = 1e5, 10.0
        noisy = add_noise(np.zeros(100_000), I0, sigma, rng)
        predicted = math.sqrt(1 / I0 + sigma**2 / I0**2)
        assert noisy.std() == pytest.approx(predicted, rel=0.05)
        assert abs(noisy.mean()) < 5 * predicted / math.sqrt(1e5) + 1e-5

    def test_noiseless_limit(self, rng):
        clean = rng.uniform(0, 4, 1000)
        assert np.abs(add_noise(clean, 1e9, 0.0, rng) - clean).max() < 1e-3

    def test_reproducible(self):
        clean = np.linspace(0, 3, 50)
        a = add_noise(clean, 1e5, 10.0, np.random.default_rng(9))
        b = add_noise(clean, 1e5, 10.0, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_counts_clamped(self, rng):
        out = add_noise(np.full(100, 50.0), 1e5, 10.0, rng)
        assert np.all(np.isfinite(out)) and out.max() <= math.log(1e5)

    def test_positive_flux(self, rng):
        with pytest.raises(ValueError):
            add_noise(np.zeros(3), 0.0, 10.0, rng)


class TestSimulate:
    def test_seeded_bit_identical(self):
        scanner = ScannerConfig.desk(n_views=3, detector_pixels=32)
        vol = phantom_shepp_logan_3d(16)
        a = simulate(vol, scanner, seed=4)
        b = simulate(vol, scanner, seed=4)
        c = simulate(vol, scanner, seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_views_independent_of_subset(self):
        # per-view streams: view k's noise does not depend on how many views precede it
        scanner = ScannerConfig.desk(n_views=4, detector_pixels=32)
        vol = phantom_shepp_logan_3d(16)
        full = simulate(vol, scanner, seed=1)
        np.testing.assert_array_equal(full.subset([0, 1]).images, full.images[:2])
        assert full.noise == {"I0": 1e5, "gauss_sigma": 10.0, "seed": 1}

    def test_save_load(self, tmp_path):
        scanner = ScannerConfig.desk(n_views=3, detector_pixels=32)
        ps = simulate(phantom_shepp_logan_3d(16), scanner, seed=2)
        ps.save(tmp_path / "p")
        back = ProjectionSet.load(tmp_path / "p")
        np.testing.assert_allclose(back.images, ps.images, rtol=1e-6)
        np.testing.assert_allclose(back.angles, ps.angles, rtol=1e-12)
        assert back.noise == ps.noise

    def test_load_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            ProjectionSet.load(tmp_path)

    def test_rejects_wrong_view_count(self):
        scanner = ScannerConfig.desk(n_views=3, detector_pixels=32)
        with pytest.raises(DataError):
            ProjectionSet(np.zeros((2, 32, 32)), scanner)
