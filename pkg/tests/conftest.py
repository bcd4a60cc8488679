"""Shared test plumbing: the acceptance criteria report.

Criterion tests record a verdict through the ``criterion`` fixture; the
collected lines are printed after the run summary so every criterion
shows one visible pass/fail line regardless of output capturing.
"""

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        _RESULTS[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")
