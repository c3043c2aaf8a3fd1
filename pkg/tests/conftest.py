import pytest

# criterion id -> (status, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL/SKIP (ok=None) line for an acceptance criterion; the test still asserts."""
    def record(cid: str, ok, detail: str = ""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE[cid] = (status, detail)
        print(f"{cid} {status} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        status, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:<4} {status:<5} {detail}")
