"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import OrderedDict

import pytest

_CRITERIA: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "why": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else ""
        entry["why"].append(f"{item.name}: {msg.splitlines()[0] if msg else 'failed'}")
    elif rep.skipped and rep.when != "teardown":
        entry["ok"] = False
        entry["why"].append(f"{item.name}: skipped")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        tr.write_line(f"criterion {n}: {status}  {e['title']}")
        for why in e["why"]:
            tr.write_line(f"    {why}")
