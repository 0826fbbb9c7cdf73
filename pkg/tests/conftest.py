import numpy as np
import pytest

from oplora.instrument import reset_counters


@pytest.fixture(autouse=True)
def _fresh_counters():
    reset_counters()
    yield


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))
