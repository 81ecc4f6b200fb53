import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtlab.geometry import paraboloid, shallow_paraboloid

settings.register_profile(
    "mtlab", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("mtlab")


@pytest.fixture
def patch2():
    return paraboloid(2)


@pytest.fixture
def patch3():
    return paraboloid(3)


@pytest.fixture
def shallow2():
    return shallow_paraboloid(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(k, ok, detail)`` prints it and keeps it for the summary."""

    def record(k, ok, detail):
        line = f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
