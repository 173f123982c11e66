"""Per-criterion summary for the acceptance suite."""

import re

_RESULTS = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    entry = _RESULTS.setdefault(key, {"name": m.group(2), "outcome": "passed", "info": []})
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and report.when == "setup":
        entry["outcome"] = "skipped"
    if report.when == "call":
        entry["info"].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_RESULTS):
        e = _RESULTS[key]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[e["outcome"]]
        line = f"criterion {key:2d} [{status}] {e['name']}"
        if e["info"]:
            line += "  (" + ", ".join(e["info"]) + ")"
        tr.write_line(line)
