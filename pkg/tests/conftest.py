import re

import pytest

_REPORT: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def add(n, ok, text):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
        _REPORT.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: (int(re.match(r"\d+", s.split()[2]).group()), s.split()[2])):
            terminalreporter.write_line(line)
