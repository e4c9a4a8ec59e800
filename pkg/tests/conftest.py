import toy


def pytest_terminal_summary(terminalreporter):
    if not toy.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(toy.CRITERIA):
        terminalreporter.write_line(toy.CRITERIA[number])
    missing = [n for n in range(1, 13) if n not in toy.CRITERIA]
    if missing:
        terminalreporter.write_line(f"not run: {', '.join(map(str, missing))}")
