import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
