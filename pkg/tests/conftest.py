import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import _acceptance  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not _acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _acceptance.summary_lines():
        terminalreporter.write_line(line)
