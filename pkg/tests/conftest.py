import numpy as np
import pytest

from gbenard.gdomain import Grid2, make_gweight
from gbenard.goperators import build_basis


@pytest.fixture(scope="session")
def grid32():
    return Grid2(32)


@pytest.fixture(scope="session")
def g_flat32(grid32):
    return make_gweight("constant", grid32)


@pytest.fixture(scope="session")
def g_wavy32(grid32):
    return make_gweight("sinusoidal", grid32, amplitude=0.2)


@pytest.fixture(scope="session")
def basis_wavy(g_wavy32):
    """Small basis shared by solver and oracle tests."""
    return build_basis(g_wavy32, 8)


@pytest.fixture(scope="session")
def basis_flat(g_flat32):
    return build_basis(g_flat32, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
