import pytest

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "details": []})
    if report.failed:
        entry["ok"] = False
        msg = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") \
            else str(report.longrepr).splitlines()[-1]
        entry["details"].append(f"{item.name} failed: {msg.splitlines()[0]}")
    elif report.when == "call" and report.passed:
        detail = getattr(item, "acceptance_detail", "")
        if detail:
            entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["ok"] else "FAIL"
        line = f"[{status}] criterion {number}: {e['title']}"
        if e["details"]:
            line += " -- " + "; ".join(d[:200] for d in e["details"])
        terminalreporter.write_line(line)
