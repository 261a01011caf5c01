import numpy as np
import pytest

from gridwatch.grid import Branch, GridTopology, load_feeder


@pytest.fixture(scope="session")
def path3():
    return load_feeder("path3")


@pytest.fixture(scope="session")
def loop8():
    return load_feeder("loop8")


@pytest.fixture(scope="session")
def loop12():
    return load_feeder("loop12")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)


def unit_path(n: int) -> GridTopology:
    """n-bus path with unit real admittances (handy for exact matrices)."""
    return GridTopology(n, tuple(Branch(i, i + 1, 1 + 0j) for i in range(1, n)))
