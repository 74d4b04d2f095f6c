from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one PASS/FAIL line per acceptance criterion."""
    lines = pytestconfig.stash[_LINES]

    def record(number: int, passed: bool, text: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {text}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
