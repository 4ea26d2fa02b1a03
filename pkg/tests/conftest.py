import numpy as np
import pytest

from thermocal.data import default_error_model, default_ground_truth, synthesize, thin
from thermocal.forward import ThermalSetup


@pytest.fixture(scope="session")
def setup():
    return ThermalSetup()


@pytest.fixture(scope="session")
def error_model():
    return default_error_model()


@pytest.fixture(scope="session")
def ground_truth():
    return default_ground_truth()


@pytest.fixture(scope="session")
def synthetic(setup, error_model, ground_truth):
    """Default synthetic dataset: 2160 readings on each of 4 sensors."""
    return synthesize(ground_truth, setup, error_model, seed=0)


@pytest.fixture(scope="session")
def small_synthetic(synthetic):
    """Every 8th reading, for quick optimizer and sampler checks."""
    return thin(synthetic, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
