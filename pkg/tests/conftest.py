import pytest

ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion."""

    def record(number, passed, detail, soft=False):
        status = "PASS" if passed else ("FLAG" if soft else "FAIL")
        ACCEPTANCE_LINES.append((number, f"[{status}] criterion {number:>2}: {detail}"))
        print(ACCEPTANCE_LINES[-1][1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
