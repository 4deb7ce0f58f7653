import numpy as np
import pytest

from xraysplat.gaussians import GaussianCloud, normalize_quaternions
from xraysplat.geometry import ScannerConfig


def random_cloud(rng, m, spread=3.0, scale=(0.6, 1.6), density=(0.2, 1.0), s_min=1.6e-3):
    """Anisotropic, randomly rotated kernels near the rotation centre."""
    return GaussianCloud.from_activated(
        rng.uniform(*density, m),
        rng.uniform(-spread, spread, (m, 3)),
        rng.uniform(*scale, (m, 3)),
        normalize_quaternions(rng.normal(size=(m, 4))),
        s_min=s_min,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scanner():
    """16x16 detector over a 16 mm box: the size used for finite-difference checks."""
    return ScannerConfig.desk(n_views=4, detector_pixels=16)


@pytest.fixture(scope="session")
def desk_scanner():
    return ScannerConfig.desk(n_views=8, detector_pixels=64)


PARAM_FIELDS = ("rho_raw", "position", "s_raw", "q_raw")


def finite_difference_errors(cloud, loss, grads, rel_step=1e-5):
    """Worst relative error per raw parameter group between ``grads`` and central differences of ``loss``.

    The step is ``rel_step`` times the parameter's own scale (at least 1).
    Errors are normalised by the largest numerical gradient of the group.
    """
    errors = {}
    for name in PARAM_FIELDS:
        arr = getattr(cloud, name)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            h = rel_step * max(abs(old), 1.0)
            arr[idx] = old + h
            up = loss(cloud)
            arr[idx] = old - h
            down = loss(cloud)
            arr[idx] = old
            num[idx] = (up - down) / (2 * h)
        ana = getattr(grads, name)
        errors[name] = float(np.abs(ana - num).max() / max(np.abs(num).max(), 1e-300))
    return errors


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the session summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
