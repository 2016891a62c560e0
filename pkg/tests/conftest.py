import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _seed_guard():
    """Keep global RNG state from leaking between tests."""
    state = np.random.get_state()
    yield
    np.random.set_state(state)
