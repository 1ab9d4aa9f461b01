import numpy as np
import pytest

from regimeml.switching_model import SwitchingArModel


@pytest.fixture
def two_state():
    q = np.array([[0.9, 0.1], [0.2, 0.8]])
    return SwitchingArModel(q, [[-1.0, 0.5], [1.0, -0.3]], [0.5, 1.0])


@pytest.fixture
def two_state_hmm():
    q = np.array([[0.9, 0.1], [0.2, 0.8]])
    return SwitchingArModel(q, [[-1.0], [1.0]], [0.7, 1.2])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""

    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
