import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        from test_acceptance import DETAILS

        _VERDICTS[n] = ("PASS" if report.passed else "FAIL", DETAILS.get(n, report.longreprtext.splitlines()[-1:]))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        if isinstance(detail, list):
            detail = detail[0] if detail else ""
        terminalreporter.write_line(f"criterion {n:2d}: {status} - {detail}")
