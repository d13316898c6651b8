import numpy as np
import pytest

from zvonkin_sde import AssumptionParams, PipelineSpec, build_pipeline, make_preset
from zvonkin_sde.coefficients import truncate


@pytest.fixture(scope="session")
def params1():
    """d=1, p1=3 assumption parameters used across modules."""
    return AssumptionParams(d=1, p1=3.0, beta=0.5, beta_tilde=1.0, delta=0.5, varpi=0.5, T=1.0)


@pytest.fixture(scope="session")
def brownian_pipe(params1):
    """Brownian preset (sigma = identity) at R=4 with a trivial map."""
    field = make_preset("brownian", 1)
    return build_pipeline(field, params1, 4.0, PipelineSpec(n=512, lam=64.0))


@pytest.fixture(scope="session")
def bump_pipe(params1):
    """Smooth bump drift at R=2, lambda fixed for speed."""
    field = make_preset("smooth_bump", 1)
    return build_pipeline(field, params1, 2.0, PipelineSpec(n=512, lam=200.0))


@pytest.fixture(scope="session")
def singular_pipe(params1):
    """Singular power drift at R=2, lambda = lambda_R_H from calibrated constants."""
    field = make_preset("singular_power", 1, c=0.5, gamma=0.3)
    return build_pipeline(field, params1, 2.0, PipelineSpec(n=1024))


@pytest.fixture
def identity_field(params1):
    return truncate(make_preset("brownian", 1), params1, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
