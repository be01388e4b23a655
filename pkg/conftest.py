"""Shared fixtures for the root test modules"""

import numpy as np
import pytest

from app.config import ParameterSet
from app.logging_config import configure_logging
from app.services.powertrain import build_powertrain

configure_logging("WARNING")


@pytest.fixture
def params() -> ParameterSet:
    return ParameterSet()


@pytest.fixture(scope="session")
def powertrain():
    return build_powertrain()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
