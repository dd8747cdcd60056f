import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from data import ObservationTable  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_table():
    """n=1000, X ~ U(0,1), pi(x) = 0.3 + 0.4x, Y | X ~ N(x, 1)."""
    gen = np.random.default_rng(2024)
    n = 1000
    x = gen.uniform(size=n)
    T = (gen.uniform(size=n) < 0.3 + 0.4 * x).astype(int)
    Y = x + gen.standard_normal(n)
    return ObservationTable(covariates=x[:, None], treatment=T, outcome=Y)


@pytest.fixture
def instrument_table():
    """Randomized instrument with full compliance (T = W)."""
    gen = np.random.default_rng(77)
    n = 2000
    X = gen.uniform(size=(n, 2))
    W = (gen.uniform(size=n) < 0.5).astype(int)
    Y = X[:, 0] + gen.standard_normal(n)
    return ObservationTable(covariates=X, treatment=W, outcome=Y, instrument=W)
