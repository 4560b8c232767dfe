import time

import pytest

from covertsim.harness import ExperimentPlan, run_plan

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(number, passed, detail):
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_plan_run(tmp_path_factory):
    """The default 36-point campaign, executed once per session."""
    out = tmp_path_factory.mktemp("default_plan")
    t0 = time.perf_counter()
    result = run_plan(ExperimentPlan(), out, jobs=4)
    return result, out, time.perf_counter() - t0
