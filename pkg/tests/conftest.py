"""Collects the acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_OUTCOMES: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "setup" and report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _OUTCOMES[name] = ("SKIP", reason)
    elif report.when == "call":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _OUTCOMES[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_OUTCOMES):
        status, detail = _OUTCOMES[name]
        terminalreporter.write_line(f"{status:4}  {name}  {detail}")


@pytest.fixture
def detail(record_property):
    """Attach a human-readable measurement to the acceptance line of this test."""
    def add(text: str) -> None:
        record_property("detail", text)
        print(text)
    return add
