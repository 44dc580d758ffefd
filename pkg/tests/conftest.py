import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test when the criterion is not met."""

    def record(number: int, title: str, passed: bool, detail: str = "", status: str | None = None):
        status = status or ("PASS" if passed else "FAIL")
        line = f"{status} [{number:>2}] {title}: {detail}"
        _CRITERIA[number] = line
        print(line)
        if status == "SKIP":
            pytest.skip(detail)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
