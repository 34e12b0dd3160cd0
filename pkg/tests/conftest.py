import os

import pytest
from hypothesis import HealthCheck, settings

from pmo import PersistenceModel, PmoSystem, format_device
from pmo.layout import metadata_region_size

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_device(data_pages=32, max_pmos=8, name="test"):
    dev = PersistenceModel(size=4096 + metadata_region_size(max_pmos) + data_pages * 4096)
    format_device(dev, name, max_pmos)
    return dev


@pytest.fixture
def dev():
    return small_device()


@pytest.fixture
def system(dev):
    return PmoSystem.open(dev, pid=100)
