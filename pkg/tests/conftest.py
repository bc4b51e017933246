import numpy as np
import pytest

from headcond.head_model import Camera, make_desk_asset


@pytest.fixture(scope="session")
def asset():
    return make_desk_asset()


@pytest.fixture(scope="session")
def camera():
    return Camera(100.0, np.array([256.0, 256.0]))


def random_rotations(rng, n, max_angle=np.pi):
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.uniform(0.0, max_angle, size=(n, 1))


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
