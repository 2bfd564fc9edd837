def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)
