import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from xraysplat.errors import DimMismatch
from xraysplat.objectives import dssim_loss, l1_loss, psnr_3d, ssim, ssim_slices, total_loss, tv3d_loss


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def reference_ssim(a, b, data_range=1.0):
    return structural_similarity(a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


class TestL1:
    def test_identical(self, rng):
        a = rng.normal(size=(8, 8))
        assert l1_loss(a, a)[0] == 0.0
        assert not l1_loss(a, a)[1].any()

    def test_constant_offset(self, rng):
        a = rng.normal(size=(8, 8))
        assert l1_loss(a + 0.3, a)[0] == pytest.approx(0.3, rel=1e-12)

    def test_gradient(self, rng):
        a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        np.testing.assert_allclose(l1_loss(a, b)[1], numeric_grad(lambda x: l1_loss(x, b)[0], a), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            l1_loss(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(size=(16, 16))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert dssim_loss(a, a)[0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(20, 17)), rng.uniform(size=(20, 17))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    @pytest.mark.parametrize("data_range", [1.0, 4.0])
    def test_matches_reference(self, rng, data_range):
        a = rng.uniform(0, data_range, (32, 24))
        b = np.clip(a + rng.normal(scale=0.2 * data_range, size=a.shape), 0, data_range)
        assert ssim(a, b, data_range) == pytest.approx(reference_ssim(a, b, data_range), abs=1e-12)

    def test_gradient(self, rng):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        _, grad = dssim_loss(a, b)
        num = numeric_grad(lambda x: dssim_loss(x, b)[0], a)
        assert np.abs(grad - num).max() / np.abs(num).max() < 1e-5

    def test_window_must_fit(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))


class TestTV:
    def test_constant(self):
        value, grad = tv3d_loss(np.full((4, 5, 6), 2.5))
        assert value == 0.0
        assert not grad.any()

    def test_single_difference(self):
        value, _ = tv3d_loss(np.array([0.0, 1.0]).reshape(2, 1, 1))
        # the x term is 1; the other two axes have no differences
        assert value == pytest.approx(1.0 / 3.0)

    def test_gradient(self, rng):
        v = rng.normal(size=(16, 16, 16))
        _, grad = tv3d_loss(v)
        num = numeric_grad(lambda x: tv3d_loss(x)[0], v)
        np.testing.assert_allclose(grad, num, atol=1e-6)
        assert np.abs(grad - num).max() / np.abs(num).max() < 1e-4

    def test_needs_3d(self):
        with pytest.raises(ValueError):
            tv3d_loss(np.zeros((4, 4)))


class TestTotal:
    def test_default_weights(self, rng):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        v = rng.uniform(size=(4, 4, 4))
        t = total_loss(a, b, v)
        assert t.total == pytest.approx(t.l1 + 0.25 * t.dssim + 0.05 * t.tv, rel=1e-14)

    def test_zero_weights_is_l1(self, rng):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        t = total_loss(a, b, rng.uniform(size=(4, 4, 4)), lambda_ssim=0.0, lambda_tv=0.0)
        assert t.total == l1_loss(a, b)[0]
        assert t.grad_volume is None

    def test_identical_inputs(self, rng):
        a = rng.uniform(size=(16, 16))
        t = total_loss(a, a, np.ones((4, 4, 4)))
        assert t.total == pytest.approx(0.0, abs=1e-12)

    def test_gradient(self, rng):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        v = rng.normal(size=(16, 16, 16))
        t = total_loss(a, b, v, data_range=2.0)
        num_img = numeric_grad(lambda x: total_loss(x, b, v, data_range=2.0).total, a)
        assert np.abs(t.grad_image - num_img).max() / np.abs(num_img).max() < 1e-4
        num_vol = numeric_grad(lambda x: total_loss(a, b, x, data_range=2.0).total, v)
        assert np.abs(t.grad_volume - num_vol).max() / np.abs(num_vol).max() < 1e-4

    @given(st.floats(0, 2), st.floats(0, 2))
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_components(self, ls, lt):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        v = rng.uniform(size=(4, 4, 4))
        base = total_loss(a, b, v, ls, lt).total
        assert total_loss(a, b, 2 * v, ls, lt).total >= base
        assert total_loss(a + 0.1 * np.sign(a - b), b, v, ls, lt).l1 >= total_loss(a, b, v, ls, lt).l1

    def test_negative_weight(self, rng):
        with pytest.raises(ValueError):
            total_loss(np.zeros((16, 16)), np.zeros((16, 16)), lambda_tv=-1.0)


class TestMetrics:
    def test_psnr_known_mse(self):
        ref = np.full((4, 4, 4), 0.5)
        assert psnr_3d(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_clamps(self):
        ref = np.ones((4, 4, 4))
        assert psnr_3d(np.full((4, 4, 4), 3.0), ref) == 100.0

    def test_identical(self, rng):
        ref = rng.uniform(size=(16, 16, 16))
        assert psnr_3d(ref, ref) == 100.0
        assert ssim_slices(ref, ref) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_slices_brute_force(self, rng):
        ref = rng.uniform(size=(16, 16, 16))
        vol = np.clip(ref + rng.normal(scale=0.15, size=ref.shape), 0, 1)
        per = [reference_ssim(np.take(vol, i, axis=ax), np.take(ref, i, axis=ax)) for ax in range(3) for i in range(16)]
        assert ssim_slices(vol, ref) == pytest.approx(np.mean(per), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            psnr_3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))
