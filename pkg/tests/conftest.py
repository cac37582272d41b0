"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else "FAIL"
        if number in _RESULTS and _RESULTS[number][0] == "FAIL":
            return
        _RESULTS[number] = (outcome, title, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        outcome, title, detail = _RESULTS[number]
        line = f"[{outcome}] criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
