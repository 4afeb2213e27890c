import numpy as np
import pytest

from fbcontrol.channel import FadingProcess
from fbcontrol.mdp import build_grid, estimate_kernel

STANDARD_B_SET = tuple(range(0, 31, 2))


@pytest.fixture(scope="session")
def std_grid():
    return build_grid(4, STANDARD_B_SET, 16)


@pytest.fixture(scope="session")
def std_kernel(std_grid):
    """Kernel at f_d = 1e-2 with the default estimator settings."""
    return estimate_kernel(std_grid, FadingProcess.from_doppler(4, 1e-2), 10 ** 6, np.random.default_rng(0))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
