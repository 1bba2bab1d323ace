import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluidsteer.dynamics import FluidModel
from fluidsteer.geometry import BodyShape, ClosedCurve, DomainSpec

settings.register_profile("suite", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("suite")


@pytest.fixture(scope="session")
def disk_domain():
    return DomainSpec(ClosedCurve.circle(1.0), (0.0, 0.9))


@pytest.fixture(scope="session")
def ellipse():
    return BodyShape(ClosedCurve.ellipse(0.6, 0.3), 1.0, 0.1125)


@pytest.fixture(scope="session")
def one_body(disk_domain, ellipse):
    """The single-ellipse configuration used by the bundled translate scenario."""
    return FluidModel(disk_domain, [ellipse], 20)


@pytest.fixture(scope="session")
def two_bodies(disk_domain):
    small = BodyShape(ClosedCurve.ellipse(0.3, 0.15), 1.0, 0.03)
    return FluidModel(disk_domain, [small, small], 20)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(CRITERIA, [])

    def record(number: int, label: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
