import numpy as np
import pytest

from sva import InstantonControl, make_lq_case, make_ou_quartic


@pytest.fixture(scope="session")
def ou():
    return make_ou_quartic()


@pytest.fixture(scope="session")
def lq():
    return make_lq_case(1.0, 1.0)


@pytest.fixture(scope="session")
def ou_order1(ou):
    return InstantonControl(order=1, dt=5e-3).fit(*ou)


@pytest.fixture(scope="session")
def ou_order2(ou):
    return InstantonControl(order=2, dt=5e-3).fit(*ou)


@pytest.fixture(scope="session")
def lq_order2(lq):
    return InstantonControl(order=2, dt=1e-3).fit(*lq)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    if not hasattr(request.config, "_acceptance_lines"):
        request.config._acceptance_lines = []
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
