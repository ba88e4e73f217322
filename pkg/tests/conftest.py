import numpy as np
import pytest

from fvshe.field import quartic_initial_value
from fvshe.mesh import build_rect_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def u0():
    return quartic_initial_value()


@pytest.fixture(scope="session")
def mesh16():
    return build_rect_mesh(16)
