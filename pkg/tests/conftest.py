import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = {}


class Criterion:
    """Collects details for one acceptance criterion; the outcome is set by the test."""

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.notes = []
        self.passed = None

    def note(self, text):
        self.notes.append(text)


@pytest.fixture
def criterion(request):
    def make(number, title):
        c = Criterion(number, title)
        ACCEPTANCE[number] = c
        return c

    yield make


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and "criterion" in item.fixturenames:
        for c in ACCEPTANCE.values():
            if c.passed is None:
                c.passed = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        c = ACCEPTANCE[n]
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[c.passed]
        tr.write_line(f"criterion {n}: {status}  {c.title}")
        for note in c.notes:
            tr.write_line(f"    {note}")
