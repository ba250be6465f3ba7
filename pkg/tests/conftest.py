import re

import pytest

_NOTES: dict[str, list[str]] = {}
_OUTCOMES: dict[int, tuple[str, str]] = {}
_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


@pytest.fixture
def note(request):
    """Attach a measurement line to the current test for the acceptance summary."""
    lines = _NOTES.setdefault(request.node.nodeid, [])
    return lines.append


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        prev = _OUTCOMES.get(n, ("PASS", report.nodeid))[0]
        status = "FAIL" if failed or prev == "FAIL" else "PASS"
        _OUTCOMES[n] = (status, report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status, nodeid = _OUTCOMES[n]
        name = _CRITERION.search(nodeid).group(2).replace("_", " ")
        tr.write_line(f"criterion {n:2d}: {status}  {name}")
        for line in _NOTES.get(nodeid, []):
            tr.write_line(f"              {line}")
    passed = sum(s == "PASS" for s, _ in _OUTCOMES.values())
    tr.write_line(f"{passed}/{len(_OUTCOMES)} criteria passed")
