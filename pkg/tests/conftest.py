import os
import sys

import numpy as np
import pytest

# Add src to python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.ppimce.ckks import preset
from src.ppimce.config import ArchProfile, DispatchConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_params():
    return preset("toy")


@pytest.fixture
def profile():
    return ArchProfile()


@pytest.fixture
def two_units():
    return DispatchConfig(units=2)


@pytest.fixture
def runs_db(tmp_path):
    return str(tmp_path / "runs.db")
