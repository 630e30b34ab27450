import numpy as np
import pytest

from dppvi.data import synth_logreg


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture(scope="session")
def logreg_data():
    theta = np.array([0.5, 1.0, -1.0, 0.5, 0.0, 2.0])
    return synth_logreg(600, 5, theta, seed=3)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
