import pytest

from langseg.rng import Rng
from langseg.tensor import Tensor


@pytest.fixture
def rng():
    return Rng(1234)


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, requires_grad=True):
    return Tensor(rng.uniform(shape, lo, hi), requires_grad=requires_grad)


@pytest.fixture
def make_tensor(rng):
    def _make(shape, lo=-1.0, hi=1.0, requires_grad=True):
        return rand_tensor(rng, shape, lo, hi, requires_grad)
    return _make
