import numpy as np
import pytest

from src.model import build_model
from src.spectral import spectral_decompose


def two_point(a, b):
    return [{"p": "1/2", "counts": list(a)}, {"p": "1/2", "counts": list(b)}]


S1_SPEC = {"types": 1, "initial_type": 1, "offspring": {"1": two_point([1], [3])}}

S2_SPEC = {
    "types": 2,
    "initial_type": 1,
    "offspring": {"1": two_point([2, 2], [4, 0]), "2": two_point([2, 2], [0, 4])},
}

# A = [[3,1,0],[0,2,1],[1,1,3]]: rho = 4, bloque de Jordan 2x2 en lambda = 2
JORDAN_SPEC = {
    "types": 3,
    "initial_type": 1,
    "offspring": {
        "1": two_point([2, 0, 2], [4, 0, 0]),
        "2": two_point([0, 2, 2], [2, 2, 0]),
        "3": two_point([0, 0, 4], [0, 2, 2]),
    },
}

# A = [[2,2],[1,3]]: autovalores 4 y 1
DUAL_PATH_SPEC = {
    "types": 2,
    "initial_type": 2,
    "offspring": {"1": two_point([1, 1], [3, 1]), "2": two_point([2, 2], [2, 4])},
}

DETERMINISTIC_SPEC = {"types": 1, "initial_type": 1, "offspring": {"1": [{"p": 1, "counts": [2]}]}}


@pytest.fixture
def s1():
    return build_model(S1_SPEC)


@pytest.fixture
def s2():
    return build_model(S2_SPEC)


@pytest.fixture
def jordan():
    return build_model(JORDAN_SPEC)


@pytest.fixture
def dual_path():
    return build_model(DUAL_PATH_SPEC)


@pytest.fixture
def deterministic():
    return build_model(DETERMINISTIC_SPEC)


@pytest.fixture
def s1_spectral(s1):
    return spectral_decompose(s1.mean)


@pytest.fixture
def s2_spectral(s2):
    return spectral_decompose(s2.mean)


@pytest.fixture
def jordan_spectral(jordan):
    return spectral_decompose(jordan.mean)


@pytest.fixture
def dual_path_spectral(dual_path):
    return spectral_decompose(dual_path.mean)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sample_columns(model, j, size, rng):
    """`size` realizaciones independientes de L^(j), una por fila."""
    law = model.laws[j]
    weights = law.weights
    idx = rng.choice(len(law), size=size, p=weights / weights.sum())
    return law.columns[idx]
