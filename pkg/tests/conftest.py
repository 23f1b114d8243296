"""Shared fixtures plus a per-criterion summary for the acceptance run."""

from __future__ import annotations

import numpy as np
import pytest

from longfuse.volume import INTENSITY, LABEL, Volume

_acceptance_outcomes: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance_outcomes.append((name, report.outcome))
    elif report.when == "setup" and report.outcome != "passed":
        _acceptance_outcomes.append((name, report.outcome))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_outcomes:
        word = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{word}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def label_volume(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.int32), spacing, LABEL)


def intensity_volume(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float64), spacing, INTENSITY)
