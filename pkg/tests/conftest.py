import pytest


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line per acceptance criterion and return the verdict."""
    lines = request.config._acceptance

    def _record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
