from __future__ import annotations

import numpy as np
import pytest

from viinit import simulator as sm

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    ACCEPTANCE_RESULTS[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        status, title, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")


@pytest.fixture(scope="session")
def clean_window():
    """Noise-free, bias-free, global-shutter stereo window (5 frames, N_f = 3, 100 points)."""
    spec = sm.SimulationSpec(max_windows=1)
    return sm.simulate(spec, seed=3)[0]


@pytest.fixture(scope="session")
def small_window():
    """Noise-free window with 20 points (cheap dense oracles)."""
    spec = sm.SimulationSpec(max_windows=1, n_points=20)
    return sm.simulate(spec, seed=5)[0]


@pytest.fixture(scope="session")
def noisy_window(clean_window):
    noise = sm.NoiseSpec(pixel_sigma=0.3, gyro_noise_density=1.7e-4, accel_noise_density=2e-3)
    return clean_window.realize(noise, np.random.default_rng(11))
