import time

import pytest

_VERDICTS: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    elapsed = dict(item.user_properties).get("elapsed", 0.0)
    detail = ""
    if report.failed:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    _VERDICTS[number] = (title, report.outcome, elapsed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, outcome, elapsed, detail = _VERDICTS[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:>2} {verdict}  {title} ({elapsed:.1f} s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
