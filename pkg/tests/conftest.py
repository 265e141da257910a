import numpy as np
import pytest
import torch

from bodyfit.body_model import generate_toy_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def model():
    return generate_toy_model(7, N=900)


@pytest.fixture(scope="session")
def small_model():
    return generate_toy_model(3, N=240)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotations(rng, count, max_angle=np.pi):
    """Uniform-axis rotation vectors with angles below ``max_angle``."""
    axes = rng.standard_normal((count, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(0, max_angle, (count, 1))


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
