"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def _short(report) -> str:
    crash = getattr(report.longrepr, "reprcrash", None)
    msg = crash.message if crash else str(report.longrepr)
    return msg.splitlines()[0][:160] if msg else ""


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "why": ""})
    if report.when == "call" or report.outcome != "passed":
        if report.outcome != "passed" and entry["ok"]:
            entry["ok"] = False
            entry["why"] = _short(report)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if not e["ok"]:
            line += f"  [{e['why']}]"
        tr.write_line(line)
