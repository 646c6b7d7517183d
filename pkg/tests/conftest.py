import pytest

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Register the outcome line of an acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        _CRITERIA[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        print(_CRITERIA[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
