import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ragl", max_examples=40, deadline=None)
settings.load_profile("ragl")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    def report(name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
