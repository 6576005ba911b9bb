import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spatial_sir import _backend
from spatial_sir.model import CompartmentProfile, InitialDistribution, Uniform, sample_initial_population

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = _backend.available_backends()

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        ok, detail = ACCEPTANCE_LINES[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_population(N, seed, infected=0.3, removed=0.1):
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=infected, removed_base=removed))
    return sample_initial_population(dist, N, seed)
