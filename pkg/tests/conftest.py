# tests/conftest.py
import numpy as np
import pytest

from modules.collision import AngularQuadrature
from modules.experiments import gaussian_bump
from modules.kernel_grid import Distribution, KernelParams, make_grid, maxwellian


@pytest.fixture
def grid4():
    return make_grid(4, 2.0)


@pytest.fixture
def grid6():
    return make_grid(6, 4.0)


@pytest.fixture
def kernel6(grid6):
    """Очень мягкое ядро γ=-1, s=1/2 с δ = h/2 и грубым угловым обрезанием"""
    return KernelParams(-1.0, 0.5, eps_theta=0.2, delta_rel=0.5 * grid6.spacing)


@pytest.fixture
def moderate6(grid6):
    """Умеренно мягкое ядро γ=-1/2, s=1/2"""
    return KernelParams(-0.5, 0.5, eps_theta=0.2, delta_rel=0.5 * grid6.spacing)


@pytest.fixture
def angular():
    return AngularQuadrature(n_theta=4, n_phi=4)


@pytest.fixture
def maxwell6(grid6):
    return maxwellian(grid6)


@pytest.fixture
def bump6(grid6):
    return Distribution(grid6, gaussian_bump(grid6, (0.5, 0.0, 0.0), 0.9, 1.0), 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
