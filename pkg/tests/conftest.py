import numpy as np
import pytest

from mupar.numcore import SeededRng

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return SeededRng(20240, 0)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def np_rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
