import pytest

from percept_cegis import sim
from percept_cegis.core import ScenarioId


@pytest.fixture
def lane():
    return sim.default_scenario(ScenarioId.LANE_KEEPING)


@pytest.fixture
def brake():
    return sim.default_scenario(ScenarioId.BRAKING)


def pytest_terminal_summary(terminalreporter):
    verdicts = getattr(__import__("sys").modules.get("test_acceptance"), "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
