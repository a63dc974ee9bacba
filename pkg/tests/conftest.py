import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""

    def record(n, ok, detail, skipped=False):
        _CRITERIA[n] = ("SKIP" if skipped else "PASS" if ok else "FAIL", detail)
        print(f"CRITERION {n}: {_CRITERIA[n][0]} - {detail}")
        if skipped:
            pytest.skip(detail)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {status} - {detail}")
