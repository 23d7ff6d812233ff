import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from czvar.grid import Cube, ScalarSignal, VectorSignal

settings.register_profile(
    "czvar", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("czvar")


@pytest.fixture
def unit():
    return Cube.from_bounds([0.0], 1.0)


@pytest.fixture
def domain1():
    """``[-1, 3)``: ``[0, 1)`` is the level-2 cube with index 1."""
    return Cube.from_bounds([-1.0], 4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_scalar(rng, domain, res, support=None):
    vals = np.round(rng.normal(size=(res,) * domain.d) * 2**20) / 2**20
    f = ScalarSignal(domain, vals)
    if support is not None:
        f = f.restrict(support)
    return f


def random_vector(rng, domain, res, n, support=None):
    vals = np.round(rng.normal(size=(res,) * domain.d + (n,)) * 2**20) / 2**20
    f = VectorSignal(domain, vals)
    if support is not None:
        f = f.restrict(support)
    return f
