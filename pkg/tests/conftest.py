import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tgtbench.netgen import ChannelInstance, gen_dataset

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_set():
    """60 instances at n=6, shared by several modules."""
    return gen_dataset([6], 12, 5, seed=7)


def random_instance(rng, n, sigma2=2.6e-5):
    H = rng.uniform(0.05, 1.0, size=(n, n))
    H[np.diag_indices(n)] += 0.5
    return ChannelInstance(H, sigma2)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
