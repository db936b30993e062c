import numpy as np
import pytest

from vlfuse import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, name=None, grad=True):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, name=name)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
