"""Collects one verdict line per acceptance criterion and prints them after the run."""

ACCEPTANCE_LINES = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
