import pytest

# (criterion id, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(cid: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((cid, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {title} -- {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {cid:>2}. {title}: {detail}")
