import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybridva.contract import ContractSpec, MarketParams
from hybridva.pde import GridConfig, build_grid

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def market():
    return MarketParams()


@pytest.fixture
def spec():
    return ContractSpec()


@pytest.fixture
def small_grid(spec):
    """Coarse mesh for fast engine-level tests."""
    return build_grid(spec, GridConfig(n_x=30, n_base=20, n_tau=10))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
