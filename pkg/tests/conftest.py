import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_A" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_"):]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if status == "FAIL" and not detail:
            detail = (report.longreprtext or "").strip().splitlines()[-1:] or [""]
            detail = detail[0]
        _ACCEPTANCE[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        label, _, title = name.partition("_")
        terminalreporter.write_line(f"{label} {status}  {title.replace('_', ' ')}: {detail}")
