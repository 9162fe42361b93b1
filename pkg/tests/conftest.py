import numpy as np
import pytest

from apu_fdi.config import builtin_case
from apu_fdi.experiment import with_overrides
from apu_fdi.model import augment, builtin_model


@pytest.fixture(scope="session")
def model():
    return builtin_model()


@pytest.fixture(scope="session")
def aug(model):
    return augment(model)


@pytest.fixture(scope="session")
def case1():
    return builtin_case("case1")


@pytest.fixture
def small_case(case1):
    """Case 1 shrunk to a few short runs for fast harness tests."""
    return with_overrides(case1, runs_per_class=2, n_steps=600, window=100, rmse_start=50,
                          degradation={"ramp_start": 50, "ramp_end": 400})


def random_spd(rng, n, scale=1.0):
    L = rng.normal(size=(n, n))
    return scale * (L @ L.T + 0.1 * np.eye(n))
