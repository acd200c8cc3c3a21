import numpy as np
import pytest
from hypothesis import settings

from dramlocker.dram import DramConfig
from dramlocker.victim import load_dataset, load_model

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def desk():
    return DramConfig.desk()


@pytest.fixture(scope="session")
def fixture_model():
    return load_model()


@pytest.fixture(scope="session")
def test_set():
    return load_dataset(split="test")


@pytest.fixture(scope="session")
def attack_batch():
    return load_dataset(split="train").sample(128, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
