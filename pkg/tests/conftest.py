import numpy as np
import pytest

from homoglab.grid import Box
from homoglab.operators import SymMatrix


@pytest.fixture
def unit_box():
    return Box((-0.5, -0.5), 1.0)


@pytest.fixture
def eye():
    return SymMatrix.of(np.eye(2))


def random_sym(rng, d=2, scale=1.0):
    m = rng.normal(size=(d, d)) * scale
    return SymMatrix(0.5 * (m + m.T))
