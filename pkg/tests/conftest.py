import pytest

CRITERIA = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the summary line of the test's criterion."""
    number, title = request.node.get_closest_marker("criterion").args
    entry = CRITERIA.setdefault(number, {"title": title, "failed": False, "ran": False})
    return entry.setdefault("notes", []).append


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = CRITERIA.setdefault(number, {"title": title, "failed": False, "ran": False})
    if report.when == "call" or report.failed:
        entry["ran"] = True
        entry["failed"] |= report.failed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = "FAIL" if entry["failed"] else ("PASS" if entry["ran"] else "SKIP")
        notes = "; ".join(entry.get("notes", []))
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}"
                                    + (f"  [{notes}]" if notes else ""))
