"""Per-criterion PASS/FAIL summary for the acceptance suite."""
from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            num, title = mark.args
            _RESULTS.setdefault(num, {"title": title, "ok": True, "ran": False, "notes": [], "seconds": 0.0})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _RESULTS[mark.args[0]]
    # setup time included: shared session fixtures are charged to their first user
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
        entry["notes"].append(item.name)
    for name, value in item.user_properties:
        if name == "measured" and rep.when == "call":
            entry["notes"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, e in sorted(_RESULTS.items()):
        if not e["ran"]:
            status = "SKIP"
        else:
            status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {num:2d}: {status}  {e['title']}"
        if e["ran"]:
            line += f"  ({e['seconds']:.1f} s)"
        measured = [n for n in e["notes"] if not n.startswith("test_")]
        if measured:
            line += "  [" + "; ".join(measured) + "]"
        terminalreporter.write_line(line)
