import numpy as np
import pytest

from hdgwave.mesh import build_structured_box


@pytest.fixture(scope="session")
def box221():
    return build_structured_box([1.0, 1.0, 1.0], [2, 2, 1])


@pytest.fixture(scope="session")
def box111():
    return build_structured_box([1.0, 1.0, 1.0], [1, 1, 1])


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
