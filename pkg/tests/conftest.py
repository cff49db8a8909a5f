import acceptlog


def pytest_terminal_summary(terminalreporter):
    if acceptlog.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptlog.RESULTS:
            terminalreporter.write_line(line)
