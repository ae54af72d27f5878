import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gnnlf.geometry import random_conf
from gnnlf.model import GNNLF, ModelConfig

settings.register_profile(
    "default", max_examples=30, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return GNNLF(ModelConfig(hidden=8, rbf=8, layers=2, cutoff=5.0, use_d2=True), seed=3)


@pytest.fixture
def conf(rng):
    return random_conf(rng, 6)
