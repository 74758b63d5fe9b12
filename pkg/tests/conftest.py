from __future__ import annotations

from collections import OrderedDict

import pytest

from spegc.backbone import PretrainConfig, pretrain_source

_CRITERIA: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            entry = _CRITERIA.setdefault(number, {"title": title, "tests": {}})
            entry["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid in entry["tests"]:
            failed = report.failed or (report.when == "setup" and report.skipped)
            if report.when == "call" or failed:
                prev = entry["tests"][report.nodeid]
                entry["tests"][report.nodeid] = "fail" if failed or prev == "fail" else "pass"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = list(entry["tests"].values())
        if any(o is None for o in outcomes) and not any(o == "fail" for o in outcomes):
            status = "NOT RUN"
        else:
            status = "PASS" if all(o == "pass" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")


@pytest.fixture(scope="session")
def pretrained():
    """Default source model (seed 0); trained once per session."""
    return pretrain_source(PretrainConfig())


@pytest.fixture
def source_model(pretrained):
    return pretrained.model.copy()
