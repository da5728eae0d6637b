import numpy as np
import pytest

from carleman_lab.geometry import make_star_domain


@pytest.fixture(scope="session")
def shell():
    """Default shell segment ``1 <= r <= 2``."""
    return make_star_domain("const:1", 2.0)


@pytest.fixture(scope="session")
def sector():
    """Thin shell sector used by the CGO and identity tests."""
    from carleman_lab.uniqueness import default_domain
    return default_domain()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
