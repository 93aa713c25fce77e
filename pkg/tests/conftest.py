import pytest

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        k, title = mark.args
        _criteria.append((k, title, "PASS" if rep.passed else "FAIL", getattr(item, "summary", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k, title, status, summary in sorted(_criteria):
        line = f"[{status}] criterion {k}: {title}"
        terminalreporter.write_line(line + (f"  ({summary})" if summary else ""))
