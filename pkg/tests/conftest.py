"""Collects acceptance outcomes and prints one summary line per criterion."""

import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"passed": True, "details": []})
    if not report.passed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if entry['passed'] else 'FAIL'}"
                                    + (f" ({detail})" if detail else ""))
