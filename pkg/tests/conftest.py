from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def nsl_sample():
    return FIXTURES / "nsl_kdd_sample.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
