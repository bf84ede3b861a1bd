"""
Shared fixtures; ``slow`` tests run only with COTLAB_RUN_SLOW=1.
"""

import numpy as np
import pytest

from src.settings import settings


def pytest_collection_modifyitems(config, items):
    if settings.run_slow:
        return
    skip = pytest.mark.skip(reason="slow acceptance check, set COTLAB_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, arrays, key, index, eps=1e-6):
    """d f / d arrays[key][index] by central differences; restores the entry."""
    original = arrays[key][index]
    arrays[key][index] = original + eps
    up = f()
    arrays[key][index] = original - eps
    down = f()
    arrays[key][index] = original
    return (up - down) / (2.0 * eps)
