import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def record_acceptance():
    """Collect one pass/fail line per acceptance criterion for the summary."""
    return _ACCEPTANCE.append


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE:
        terminalreporter.write_line(line)
