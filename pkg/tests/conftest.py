"""Shared fixtures and the acceptance-summary reporter."""
from __future__ import annotations

from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"

_acceptance: list[tuple[str, bool]] = []


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance" in report.nodeid and "::test_c" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in sorted(_acceptance):
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
