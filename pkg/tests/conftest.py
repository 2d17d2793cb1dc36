import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the pass flag for the caller to assert."""

    def record(number: int, name: str, measured: str, tolerance: str, passed: bool) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}  {name}: {measured}  (target {tolerance})"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
