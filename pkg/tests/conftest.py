import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gbsde.forward import SdeCoefficients

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# at least this many generated cases for every invariant suite
PROPERTY_CASES = 250


@pytest.fixture
def bm_dyn():
    """``dX = dB`` in one dimension."""
    return SdeCoefficients.from_strings(["0"], [["1"]], {}, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
