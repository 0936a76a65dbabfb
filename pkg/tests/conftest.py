import os

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    if report.when == "call":
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _CRITERIA[number] = (title, status, detail)
    elif report.when == "setup" and report.skipped:
        _CRITERIA[number] = (title, "SKIP", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")
    elif report.failed and number not in _CRITERIA:
        _CRITERIA[number] = (title, "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture
def record(request):
    """Attach a measured summary to the criterion line of this test."""
    def _record(text):
        request.node.criterion_detail = text
        print(f"[criterion] {text}")
    return _record
