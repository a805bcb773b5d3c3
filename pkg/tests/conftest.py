import numpy as np
import pytest

from miscal import (
    MLPOracle,
    ProbVector,
    Sample,
    TrainConfig,
    generate_blobs,
    train_mlp,
)
from miscal.victims import LookupVictim, VictimOracle


@pytest.fixture(scope="session")
def blob_data():
    """Well-separated two-class blobs: near-perfect victim territory."""
    return generate_blobs(2, 200, 8, 3.0, seed=11)


@pytest.fixture(scope="session")
def blob_victim(blob_data):
    return train_mlp(blob_data, TrainConfig(seed=5))


@pytest.fixture(scope="session")
def soft_data():
    """Three overlapping classes: accurate but attackable victim territory."""
    return generate_blobs(3, 200, 10, 1.5, seed=7)


@pytest.fixture(scope="session")
def soft_victim(soft_data):
    return train_mlp(soft_data, TrainConfig(seed=3))


@pytest.fixture
def soft_oracle(soft_victim):
    return MLPOracle(soft_victim)


@pytest.fixture
def constant_oracle():
    """Oracle returning the same distribution everywhere: no improving candidate exists."""
    victim = LookupVictim(3, ProbVector([0.6, 0.3, 0.1]))
    return VictimOracle(victim)


def make_sample(features, label=0):
    return Sample(np.asarray(features, dtype=float), label)
