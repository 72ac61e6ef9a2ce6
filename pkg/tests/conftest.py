import re

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> {"ok": bool, "details": [str]}, filled from test_acceptance.py
CRITERIA: dict[int, dict] = {}
DETAILS: dict[str, str] = {}


@pytest.fixture
def detail(request):
    """Let an acceptance test attach a one-line measurement to its summary line."""
    def record(text: str) -> None:
        DETAILS[request.node.nodeid] = text
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or (rep.when != "call" and not rep.failed):
        return
    n = int(m.group(1))
    entry = CRITERIA.setdefault(n, {"ok": True, "details": []})
    entry["ok"] &= not rep.failed
    if rep.when == "call" and item.nodeid in DETAILS:
        entry["details"].append(DETAILS[item.nodeid])


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += "  (" + "; ".join(e["details"]) + ")"
        terminalreporter.write_line(line)
