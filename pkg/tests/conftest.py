import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# acceptance criterion name -> "passed" / "failed" / "skipped"
_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = getattr(getattr(item, "function", None), "criterion", None)
    if name is None:
        return
    # a failing fixture setup counts against the criterion too
    if report.when == "call" or report.outcome != "passed":
        if _criteria.get(name) in (None, "passed"):
            _criteria[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _criteria.items():
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
