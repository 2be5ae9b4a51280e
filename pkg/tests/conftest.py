import pytest

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    entry = _RESULTS.setdefault(name, {"passed": True, "seconds": 0.0, "notes": []})
    # setup time counts too: shared training runs happen in module fixtures
    entry["seconds"] += report.duration
    if report.when == "call" or report.failed:
        entry["passed"] = entry["passed"] and report.passed
        entry["notes"] += [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    width = max(len(n) for n in _RESULTS)
    for name, r in _RESULTS.items():
        status = "PASS" if r["passed"] else "FAIL"
        notes = ("  " + ", ".join(r["notes"])) if r["notes"] else ""
        tr.write_line(f"{status}  {name:<{width}}  {r['seconds']:7.1f}s{notes}")
