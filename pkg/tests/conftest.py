import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" or report.failed:
        # a setup or teardown failure counts against the criterion too
        if report.failed or name not in _acceptance:
            _acceptance[name] = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[2]) if n.split("_")[2].isdigit() else 0):
        terminalreporter.write_line(f"{_acceptance[name]}  {name}")
