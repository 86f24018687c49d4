import numpy as np
import pytest

from fsm_placer.dynamics import ControlVector, TimeGrid, builtin_model, integrate
from fsm_placer.observe import identity_operator
from fsm_placer.sensitivity import propagate


@pytest.fixture(scope="session")
def grid():
    return TimeGrid.from_horizon(2.0, 1e-3)


@pytest.fixture(scope="session")
def coarse_grid():
    return TimeGrid.from_horizon(2.0, 1e-2)


@pytest.fixture(scope="session")
def truth():
    return ControlVector([2.0], [-1.0])


@pytest.fixture(scope="session")
def linear_model():
    return builtin_model("linear_decay")


@pytest.fixture(scope="session")
def quadratic_model():
    return builtin_model("quadratic_decay")


@pytest.fixture(scope="session")
def scalar_obs():
    return identity_operator(1)


@pytest.fixture(scope="session")
def linear_run(linear_model, truth, grid):
    trajectory = integrate(linear_model, truth, grid)
    return trajectory, propagate(linear_model, trajectory)


@pytest.fixture(scope="session")
def quadratic_run(quadratic_model, truth, grid):
    trajectory = integrate(quadratic_model, truth, grid)
    return trajectory, propagate(quadratic_model, trajectory)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
