from __future__ import annotations

import os

import pytest
from hypothesis import settings

os.environ.setdefault("SOURCE_DATE_EPOCH", "1700000000")

# JIT compilation on first call would otherwise trip per-example deadlines
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_acceptance: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("acceptance")
    if marker is None:
        return
    number, title = marker
    outcome = "PASS" if report.passed else "FAIL"
    if hasattr(report, "wasxfail"):
        outcome = "XFAIL"
    _acceptance[number] = (title, outcome, report.duration)


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("acceptance")
    if m is not None:
        item.user_properties.append(("acceptance", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, outcome, duration = _acceptance[number]
        terminalreporter.write_line(f"[{outcome}] criterion {number}: {title} ({duration:.1f} s)")
