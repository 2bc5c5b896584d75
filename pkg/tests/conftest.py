import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo acceptance verdicts after capture ends so they reach the log."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None) if module else None
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
