import numpy as np
import pytest

from pgbme.model import CovariateSet, ObservedNetwork
from pgbme.samplers import rng_stream


@pytest.fixture
def rng():
    return rng_stream(20240611)


def random_covariates(rng, n, p_node=1, p_dyad=2):
    return CovariateSet(rng.standard_normal((n, p_node)),
                        rng.standard_normal((n, n, p_dyad)))


def random_network(rng, n, density=0.3):
    upper = np.triu(rng.random((n, n)) < density, 1)
    return ObservedNetwork((upper | upper.T).astype(np.int8))


@pytest.fixture
def small_problem(rng):
    n = 12
    return random_network(rng, n), random_covariates(rng, n)


# Lines recorded by the acceptance suite, echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
