"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

ACCEPTANCE = {}


def record(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(str(k).split("-")[0]), str(k))):
        terminalreporter.write_line(ACCEPTANCE[key])
