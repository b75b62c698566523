import numpy as np
import pytest

from sdmem.model import SubjectConfig
from sdmem.models import get_model
from sdmem.simulate import SimPlan, simulate_population
from sdmem.suffstats import compute_all

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def simulate_stats(name, n, dt_fine, thin=1, horizon=None, seed=0, theta=None, scheme="first"):
    """Small simulated dataset for a registered model, returned as (stats, realized subjects)."""
    m = get_model(name)
    T = m.horizon if horizon is None else horizon
    subjects = [SubjectConfig(m.x0, T, m.covariate_for(i)) for i in range(n)]
    plan = SimPlan(dt_fine, thin, n, seed, m.theta_true if theta is None else theta, subjects)
    pop = simulate_population(m.spec, plan)
    return compute_all(m.spec, [rs.trajectory for rs in pop], scheme), pop


@pytest.fixture(scope="session")
def transfer5_small():
    return simulate_stats("transfer5", 10, 1e-3, thin=1, horizon=5.0, seed=11)[0]


@pytest.fixture(scope="session")
def fhn_small():
    return simulate_stats("fhn", 30, 1e-3, thin=1, horizon=10.0, seed=12)[0]


@pytest.fixture(scope="session")
def ou_small():
    return simulate_stats("ou", 30, 1e-3, thin=1, seed=13)[0]


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T / d + 0.3 * np.eye(d))
