import pytest

RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        RESULTS[criterion] = (bool(ok), detail)
        print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
