import numpy as np
import pytest

from affine_filter.aff import PriorMixture
from affine_filter.models import CirModel, cir_sample_path, derive_rng
from affine_filter.observation import ObservationModel, generate_observations, make_schedule

CASE1 = dict(b=1e-6, beta=-0.2, sigma=0.04)
X0, S0, GAMMA = 0.005, 2e-5, 0.005


@pytest.fixture(scope="session")
def cir():
    return CirModel(**CASE1)


@pytest.fixture(scope="session")
def case1(cir):
    """Case-1 signal, record, schedule and prior on [0, 1] with N = 1000."""
    grid = np.linspace(0.0, 1.0, 1001)
    rng = derive_rng(0, 0)
    path = cir_sample_path(rng, X0, S0, grid, cir)
    om = ObservationModel.scalar(GAMMA)
    record = generate_observations(rng, path, om)
    return path, record, make_schedule(om, [X0]), PriorMixture.clamped_normal(X0, S0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
