import numpy as np
import pytest

from motionforecast import kindata


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def skeleton():
    return kindata.pendulum_skeleton()
