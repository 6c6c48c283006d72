ACCEPTANCE = {}


def record(number, name, passed, detail=""):
    """Store one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
