import pytest

ACCEPTANCE = []


@pytest.fixture
def record():
    """record(criterion, ok, detail) adds a line to the acceptance summary."""
    def add(criterion, ok, detail):
        ACCEPTANCE.append((criterion, bool(ok), detail))
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {crit}: {detail}")
