import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def record_criterion():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    def record(result):
        line = result.line()
        print(line)
        _ACCEPTANCE.append(line)
        return result
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
