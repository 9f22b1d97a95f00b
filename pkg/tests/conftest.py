import pytest

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture
def record():
    def _record(name, ok, detail):
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return _record
