import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # surface the per-criterion verdict lines without requiring -s
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k][1])
