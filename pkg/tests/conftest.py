import numpy as np
import pytest

from damd.dist import make_grid


@pytest.fixture(scope="session")
def grid401():
    return make_grid(0.0, 2.0, 401)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
