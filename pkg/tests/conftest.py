import pytest

# (criterion, passed, detail) tuples appended by the acceptance tests
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(name: str, passed: bool, detail: str):
        line = (name, bool(passed), detail)
        ACCEPTANCE_LINES.append(line)
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        assert passed, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
