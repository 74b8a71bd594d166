import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from exosim.dynamics import Plant, default_inertias
from exosim.kinematics import DEFAULT_LOWER, DEFAULT_UPPER, N_JOINTS, build_chain

settings.register_profile(
    "exosim", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("exosim")


@pytest.fixture(scope="session")
def chain():
    return build_chain()


@pytest.fixture(scope="session")
def inertias(chain):
    return default_inertias(chain)


@pytest.fixture(scope="session")
def plant(chain, inertias):
    return Plant(chain, inertias)


def joint_vectors():
    """Hypothesis strategy: joint vectors inside the default limits."""
    return st.lists(st.floats(0.0, 1.0), min_size=N_JOINTS, max_size=N_JOINTS).map(
        lambda u: DEFAULT_LOWER + (DEFAULT_UPPER - DEFAULT_LOWER) * np.array(u)
    )


def rate_vectors(scale=2.0):
    return st.lists(st.floats(-scale, scale), min_size=N_JOINTS, max_size=N_JOINTS).map(np.array)


def random_q(rng, n=10):
    return DEFAULT_LOWER + (DEFAULT_UPPER - DEFAULT_LOWER) * rng.uniform(0.02, 0.98, size=(n, N_JOINTS))
