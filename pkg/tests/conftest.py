import pytest

_VERDICTS = {}


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` records and prints a PASS/FAIL line, then asserts ``ok``."""
    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[n] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
