import pytest

_outcomes: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" and rep.passed:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        label, text = mark.args
        measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if label not in _outcomes or status != "PASS":
            _outcomes[label] = (status, text, measured)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label in sorted(_outcomes, key=lambda s: (int("".join(c for c in s if c.isdigit())), s)):
        status, text, measured = _outcomes[label]
        tr.write_line(f"[{status}] {label:<4} {text}" + (f"  ({measured})" if measured else ""))
