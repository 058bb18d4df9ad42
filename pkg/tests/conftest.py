import numpy as np
import pytest

from deepmf import kernels


@pytest.fixture(params=kernels.available())
def backend(request):
    """Run a test once per usable kernel backend."""
    with kernels.use(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
