"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from icreg.volume import Volume


@pytest.fixture
def rng():
    """Deterministic generator, fresh per test."""
    return np.random.default_rng(20260815)


@pytest.fixture
def small_pair(rng):
    """Two random single-channel volumes on a common 8x8x8 grid."""
    a = Volume(rng.standard_normal((8, 8, 8)))
    b = Volume(rng.standard_normal((8, 8, 8)))
    return a, b


@pytest.fixture
def random_flow(rng):
    """A mildly displacing random flow on the 8x8x8 grid."""
    return Volume(rng.uniform(-1.5, 1.5, size=(3, 8, 8, 8)))
