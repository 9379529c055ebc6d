"""Collects the outcome of every ``acceptance``-marked test and prints one
PASS/FAIL line per criterion at the end of the session."""
import pytest

_results: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    report = outcome.get_result()
    number, title = marker.args
    if report.when == "call" or report.failed or report.skipped:
        previous = _results.get(number, (title, "PASS"))[1]
        if report.failed or previous == "FAIL":
            status = "FAIL"
        else:
            status = "SKIP" if report.skipped else "PASS"
        _results[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status = _results[number]
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {title}")
