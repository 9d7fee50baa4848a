from __future__ import annotations

import pytest

_VERDICTS: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    tag, title = marker.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    detail = dict(item.user_properties).get("detail", "")
    _VERDICTS[tag] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(_VERDICTS):
        status, title, detail = _VERDICTS[tag]
        line = f"{tag} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
