import pytest

_RESULTS = {}


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(n, passed, detail)``."""

    def record(n, passed, detail):
        _RESULTS[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:2d} {'PASS' if passed else 'FAIL'}: {detail}")
