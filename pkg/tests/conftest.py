import numpy as np
import pytest

from metabias.dataset import load_bundled


@pytest.fixture(scope="session")
def tiotropium():
    return load_bundled("tiotropium")


@pytest.fixture(scope="session")
def clopidogrel():
    return load_bundled("clopidogrel")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
