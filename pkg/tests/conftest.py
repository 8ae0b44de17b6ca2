from __future__ import annotations

import numpy as np
import pytest

from helpers import SCENARIOS


@pytest.fixture(scope="session")
def scenario_dir():
    return SCENARIOS


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance reporting -------------------------------------------------------
_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    outcome = "PASS" if report.outcome == "passed" else "FAIL"
    _ACCEPTANCE.append((props["criterion"], outcome, str(props.get("detail", ""))))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{outcome}] criterion {name}: {detail}")


