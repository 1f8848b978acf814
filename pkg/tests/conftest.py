"""Collects acceptance verdicts and prints one line per criterion after the run."""
import re

import pytest

VERDICTS = {}


def _line(number):
    title, ok, detail = VERDICTS[number]
    return f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"


@pytest.fixture
def verdict(request):
    """Call ``verdict(number, title, ok, detail)`` once per acceptance criterion.

    A test named ``test_criterion_<n>_...`` that raises before recording is
    reported as a failure of criterion n.
    """

    def record(number, title, ok, detail=""):
        VERDICTS[number] = (title, bool(ok), detail)
        print(_line(number))

    yield record
    match = re.match(r"test_criterion_(\d+)", request.node.name)
    if match and int(match.group(1)) not in VERDICTS:
        record(int(match.group(1)), request.node.name, False, "raised before completing")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(_line(number))
