import numpy as np
import pytest

from isfedavg.experiments import RegressionScenario, gen_regression

_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def _report(label: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_problem():
    """K=8 heterogeneous regression instance, M=3."""
    scen = RegressionScenario(agents=8, samples=12, dim=3, participants=3, batch=(1, 4),
                              runs=1, iterations=0)
    return gen_regression(scen, np.random.default_rng(2024))
