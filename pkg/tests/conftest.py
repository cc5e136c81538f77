"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records the outcome of criterion ``n`` and returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
