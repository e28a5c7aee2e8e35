import pytest

ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Record a pass/fail line for the acceptance summary."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print("criterion %2d: %s  %s" % (number, "PASS" if ok else "FAIL", detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line("criterion %2d: %s  %s" % (number, "PASS" if ok else "FAIL", detail))
