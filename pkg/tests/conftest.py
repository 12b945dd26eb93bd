"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    item.config.stash[_RESULTS][number] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome, detail = results[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"{status}  {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
