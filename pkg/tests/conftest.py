import pytest

from gridsense.harness import Setup
from gridsense.scenario import build_ieee24
from gridsense.sfr import SystemParams, derive

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ieee24():
    return build_ieee24()


@pytest.fixture(scope="session")
def setup(ieee24):
    return Setup.from_scenario(ieee24)


@pytest.fixture(scope="session")
def derived(setup):
    return setup.derived


@pytest.fixture(scope="session")
def toy_params():
    return SystemParams(h=5.0, d=1.0, r=0.05, km=0.95, fh=0.3, tr=8.0, s_base=100.0)


@pytest.fixture(scope="session")
def toy(toy_params):
    return derive(toy_params)
