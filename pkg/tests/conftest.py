import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfturnpike.model import CostSpec, InteractionKernel, ProblemSpec, sample_initial

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_spec(n=8, dim=2, kappa=0.0, horizon=20.0, dt=0.05, seed=0, x0=None, **kw):
    kernel = InteractionKernel.linear(kappa) if kappa else InteractionKernel.zero()
    if x0 is None:
        x0 = sample_initial("uniform_ball", n, dim, 1.0, seed=seed)
    x0 = np.asarray(x0, dtype=float).reshape(-1, dim)
    return ProblemSpec(dim, horizon, dt, kernel, CostSpec.quadratic(np.zeros(dim)), x0, 1.0, **kw)


def scalar_lq(horizon=5.0, dt=1e-3, x0=1.0):
    return ProblemSpec(1, horizon, dt, InteractionKernel.zero(), CostSpec.quadratic([0.0]),
                       np.array([[x0]]), max(1.0, abs(x0)))


@pytest.fixture
def spec_factory():
    return make_spec


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
