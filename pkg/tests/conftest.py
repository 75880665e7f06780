import numpy as np
import pytest

from neuromamba import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    previous = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
