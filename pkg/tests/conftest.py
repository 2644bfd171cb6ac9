import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lmoelab", deadline=None, max_examples=60)
settings.load_profile("lmoelab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
