import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""
    def record(number, passed, detail):
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
