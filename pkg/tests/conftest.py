"""Prints one pass/fail line per acceptance criterion at the end of the run.

Acceptance tests call ``record_property("criterion", "N name")`` and may add
``record_property("detail", "...")`` with the measured numbers.
"""

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    name = props["criterion"]
    failed = report.failed
    if report.when == "call" or failed:
        prev_status, details = _criteria.get(name, ("PASS", ""))
        status = "FAIL" if failed or prev_status == "FAIL" else "PASS"
        detail = props.get("detail", "")
        if detail and detail not in details:
            details = f"{details}; {detail}" if details else detail
        _criteria[name] = (status, details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda s: int(s.split()[0])):
        status, detail = _criteria[name]
        terminalreporter.write_line(f"criterion {name}: {status}" + (f"  ({detail})" if detail else ""))
