"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import re

ACCEPTANCE = {}  # criterion number -> (passed, detail)
_pattern = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE[number] = (bool(passed), detail)
    return line


def pytest_runtest_logreport(report):
    m = _pattern.search(report.nodeid)
    if not m or report.passed:
        return
    n = int(m.group(1))
    detail = ACCEPTANCE.get(n, (False, ""))[1] or f"{report.when} error"
    ACCEPTANCE[n] = (False, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")
