import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""
    def record(number: int, passed: bool, detail: str, soft: bool = False) -> None:
        verdict = "PASS" if passed else ("FLAG" if soft else "FAIL")
        ACCEPTANCE[number] = f"criterion {number:2d}: {verdict}  {detail}"
        print(ACCEPTANCE[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
