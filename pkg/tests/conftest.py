import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pointnerf.core import CameraModel


def random_pose(rng) -> np.ndarray:
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    t = rng.normal(size=3)
    return np.concatenate([rot, t[:, None]], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return CameraModel.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 40, 40, 16, 16, 32, 32)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
