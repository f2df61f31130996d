"""Shared test plumbing: the acceptance-criteria summary.

Acceptance tests stash a one-line detail on their node; after the run the
terminal summary prints one PASS/FAIL/SKIP line per criterion so the
verdicts are visible even with captured output.
"""

import pytest

_acceptance: dict = {}


def pytest_runtest_makereport(item, call):
    if "test_acceptance.py" not in item.nodeid:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            outcome = "passed"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "skipped"
        else:
            outcome = "failed"
        detail = getattr(item, "_criterion_detail", "")
        if outcome == "skipped" and not detail:
            detail = str(call.excinfo.value)
        _acceptance[item.name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    labels = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for name in sorted(_acceptance):
        outcome, detail = _acceptance[name]
        line = f"{labels[outcome]}  {name}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
