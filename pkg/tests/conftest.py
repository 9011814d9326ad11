import pytest

# (criterion, passed, detail) lines filled in by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def verdict():
    def record(name, checks, detail=""):
        ok = all(checks.values())
        failed = ", ".join(k for k, v in checks.items() if not v)
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}" + (f" [failed: {failed}]" if failed else "")
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
