import pytest

from linenet import NetworkConfig


@pytest.fixture
def two_hop():
    return NetworkConfig(2, (0.5, 0.5), (1,))


@pytest.fixture
def mixed_line():
    """Four-hop network with congested, balanced and starved relays."""
    return NetworkConfig(4, (0.2, 0.5, 0.5, 0.2), (10, 10, 10))
