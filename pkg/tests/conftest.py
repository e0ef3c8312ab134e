import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vagnet.data import generate_sample
from vagnet.encoders import EncoderConfig
from vagnet.model import VAGNet

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_cfg():
    return EncoderConfig()


@pytest.fixture(scope="session")
def mug_sample():
    return generate_sample("mug", "grasp", 7)


@pytest.fixture
def desk_model(desk_cfg):
    return VAGNet.init(desk_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
