import numpy as np
import pytest

from rmps.dynamics import CartPole, HolonomicParticle, NonholonomicParticle
from rmps.shield import BackupAssets, ShieldConfig
from rmps.trajopt import CostWeights


@pytest.fixture(scope="session")
def cartpole():
    return CartPole()

@pytest.fixture(scope="session")
def holonomic():
    return HolonomicParticle(goal=(3.0, 3.0), obstacles=[((1.5, 1.5), 0.4)])


@pytest.fixture(scope="session")
def holonomic_free():
    return HolonomicParticle(goal=(3.0, 3.0))


@pytest.fixture(scope="session")
def nonholonomic():
    return NonholonomicParticle(goal=(3.0, 3.0), obstacles=[((1.5, 1.5), 0.4)])


@pytest.fixture(scope="session")
def weights4x1():
    return CostWeights.default(4, 1)


@pytest.fixture(scope="session")
def weights4x2():
    return CostWeights.default(4, 2)


def small_config(**kw):
    defaults = dict(samples=150, invariant_samples=300, invariant_horizon=120)
    defaults.update(kw)
    return ShieldConfig(**defaults)


@pytest.fixture(scope="session")
def holo_assets(holonomic):
    # small sample counts keep unit tests quick; acceptance uses full scale
    return BackupAssets(holonomic, small_config())


@pytest.fixture(scope="session")
def holo_free_assets(holonomic_free):
    return BackupAssets(holonomic_free, small_config())


@pytest.fixture(scope="session")
def cartpole_assets(cartpole):
    return BackupAssets(cartpole, small_config())
