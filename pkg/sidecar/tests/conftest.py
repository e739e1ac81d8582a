"""Shared fixtures and the wire-acceptance summary reporter."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[2]
FIXTURES = REPO / "fixtures"

_acceptance: list[tuple[str, bool]] = []


@pytest.fixture(scope="session")
def twin_suite() -> dict:
    with open(FIXTURES / "golden_twin_suite.json") as fh:
        return json.load(fh)


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_wire_acceptance" in report.nodeid and "::test_c" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("sidecar acceptance")
    for name, passed in sorted(_acceptance):
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
