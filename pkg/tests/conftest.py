import pytest

_REPORT = []


@pytest.fixture
def record():
    """Record a named acceptance outcome and return it for asserting."""
    def _record(name, passed, detail=""):
        _REPORT.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _REPORT:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
