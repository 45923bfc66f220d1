from __future__ import annotations

import re

_CRITERIA: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        if _CRITERIA.get(n) != "FAIL":
            _CRITERIA[n] = "PASS" if report.outcome == "passed" else "FAIL"
        _CRITERIA.setdefault(-n, m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(k for k in _CRITERIA if k > 0):
        terminalreporter.write_line(f"criterion {n:2d} {_CRITERIA[-n]:<32} {_CRITERIA[n]}")
