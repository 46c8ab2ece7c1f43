"""Per-criterion summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion("A3")`` are grouped; after the run one line
per criterion reports PASS only if every tagged test passed.
"""

from collections import OrderedDict

import pytest

CRITERIA = OrderedDict([
    ("A1", "metric and loss oracles"),
    ("A2", "finite-difference gradient checks"),
    ("A3", "semantic reinforce smoke run"),
    ("A4", "fusion behaviour"),
    ("A5", "thermal mask exactness"),
    ("A6", "region blend algebra"),
    ("A7", "bitwise reproducibility"),
])

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion this test evidences")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    entry = _outcomes.setdefault(crit, {"passed": 0, "failed": [], "skipped": 0, "values": []})
    if report.when == "call":
        entry["values"] += [(k, v) for k, v in report.user_properties if k != "criterion"]
    if report.failed:
        entry["failed"].append(report.nodeid.split("::")[-1])
    elif report.when == "call" and report.passed:
        entry["passed"] += 1
    elif report.skipped:
        entry["skipped"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit, title in CRITERIA.items():
        e = _outcomes.get(crit)
        if e is None:
            tr.write_line(f"{crit} NOT RUN  {title}")
            continue
        if e["failed"]:
            status = "FAIL"
            detail = "failed: " + ", ".join(sorted(set(e["failed"])))
        elif e["passed"] == 0:
            status = "SKIP"
            detail = f"{e['skipped']} skipped"
        else:
            status = "PASS"
            detail = f"{e['passed']} checks"
        tr.write_line(f"{crit} {status}  {title} ({detail})")
        for name, value in e["values"]:
            shown = f"{value:.6g}" if isinstance(value, float) else value
            tr.write_line(f"      {name} = {shown}")


@pytest.fixture
def report_value(record_property):
    """Attach a measured number to the test report and echo it with -s."""
    def _rec(name, value):
        record_property(name, value)
        print(f"{name} = {value}")
    return _rec
