import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def _record(n: int, ok: bool, detail: str) -> None:
        _LINES[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        print(_LINES[n])
        assert ok, _LINES[n]

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
