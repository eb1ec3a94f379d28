from acceptance_log import RESULTS, format_line


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(RESULTS, key=lambda r: r["number"]):
        terminalreporter.write_line(format_line(rec))
