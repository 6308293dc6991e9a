import numpy as np
import pytest

from sortscan import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_tape():
    yield
    ad.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
