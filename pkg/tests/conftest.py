"""Shared fixtures: small meshes and solved configurations reused across tests."""

import numpy as np
import pytest

from compflow.geometry import ArchetypeLabel, chain_config, build_network
from compflow.mesh import make_space
from compflow.fem import instantiate_network


@pytest.fixture(scope="session")
def channel_space():
    return make_space(ArchetypeLabel.CHANNEL, 2)


@pytest.fixture(scope="session")
def junction_space():
    return make_space(ArchetypeLabel.JUNCTION, 2)


@pytest.fixture(scope="session")
def chain2():
    """Straight 2-component chain at Re=50, res=2, instantiated."""
    config = chain_config(2, Re=50.0)
    net = build_network(config)
    comps = instantiate_network(net, 2)
    return net, comps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
