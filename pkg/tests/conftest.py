from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def smart_grid_path() -> Path:
    return SCENARIOS / "smart_grid.yaml"


@pytest.fixture
def negative_control_path() -> Path:
    return SCENARIOS / "nondeterministic.yaml"


# -- acceptance summary -------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` get one PASS/FAIL line each
# at the end of the session, with whatever detail the test recorded.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    entry = _criteria.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "outcome": None})

    def note(detail: str) -> None:
        entry["detail"] = detail
        print(f"criterion {marker.args[0]} ({marker.args[1]}): {detail}")

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    entry = _criteria.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "outcome": None})
    entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        verdict = entry["outcome"] or "NOT RUN"
        detail = f" - {entry['detail']}" if entry["detail"] else ""
        terminalreporter.write_line(f"criterion {number} [{entry['title']}]: {verdict}{detail}")
