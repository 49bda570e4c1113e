import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gearinsert.env import ObservationSource, offline_config, real_config

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def offline_cfg():
    return offline_config()


@pytest.fixture(scope="session")
def obs_source(offline_cfg):
    # one render cache shared by every test that needs grid images
    return ObservationSource(offline_cfg)


@pytest.fixture(scope="session")
def real_cfg():
    return real_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
