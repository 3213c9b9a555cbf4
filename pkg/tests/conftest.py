import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; call as ``verdict(number, passed, detail)``.

    ``passed=None`` records a skipped criterion.
    """

    def record(number, passed, detail):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number:>2}: {status}  {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
