import numpy as np
import pytest

from granubed.core import DomainSpec, FluidProps, ParticleProps, ParticleStore


@pytest.fixture
def props():
    return ParticleProps()


@pytest.fixture
def fluid_props():
    return FluidProps()


@pytest.fixture
def open_box():
    """Domain with gravity off, large enough that walls stay out of reach."""
    return DomainSpec(0.01, 0.01, 0.01, 50, 50, 50, gravity=(0.0, 0.0, 0.0))


def make_store(props, pos, vel=None):
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    ids = np.arange(len(pos), dtype=np.uint64)
    return ParticleStore.from_positions(ids, pos, props, vel)
