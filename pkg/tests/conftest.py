import numpy as np
import pytest

from kpirl.sim_env import ArmConfig, CameraMap, initial_state

ACCEPTANCE_LINES: list[str] = []

CENTER = np.array([1.2, 0.9, -0.6])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def arm():
    return ArmConfig()


@pytest.fixture
def camera():
    return CameraMap()


@pytest.fixture
def small_arm():
    """One object keypoint plus the background point (K = 2)."""
    return ArmConfig(object_offsets=((0.06, 0.0),))


@pytest.fixture
def start(arm, camera):
    return initial_state(arm, camera, CENTER)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
