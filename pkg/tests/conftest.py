import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_outcomes: dict[int, list[tuple[str, bool]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_runtest_logreport(report):
    marks = getattr(report, "criteria", None)
    if not marks or report.skipped:
        return
    # record the call phase, or any phase that failed (setup errors)
    if report.when == "call" or report.outcome == "failed":
        for n in marks:
            _outcomes.setdefault(n, []).append((report.nodeid, report.outcome == "passed"))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        failed = [nid.split("::")[-1] for nid, ok in results if not ok]
        line = f"criterion {n:2d}: {'FAIL' if failed else 'PASS'}"
        if failed:
            line += "  (" + ", ".join(failed) + ")"
        terminalreporter.write_line(line)
