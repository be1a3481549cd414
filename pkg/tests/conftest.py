"""Shared fixtures and the per-criterion summary of the acceptance suite."""

from __future__ import annotations

import pytest

from pemsim.config import bundled_names, load_config
from pemsim.engine import run

CRITERIA = {
    1: "30-slot two-class demo: slice soundness and capacity bound",
    2: "handshake conformance on bundled scenarios",
    3: "perfect-forecast day: no misses, nothing unserved",
    4: "energy conservation on every bundled scenario",
    5: "admission vs exhaustive oracle on the 50-instance suite",
    6: "replay determinism on every bundled scenario",
    7: "shape compliance over randomized small scenarios",
    8: "emergency escalation, admission and budget",
    9: "1000 clients x 144 slots under 10 s",
}

_outcomes: dict[int, list[str]] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or rep.outcome != "passed":
        _outcomes.setdefault(marker.args[0], []).append(rep.outcome)
    if rep.when == "call":
        lines = [l for l in rep.capstdout.splitlines() if l.startswith("[criterion")]
        _details.setdefault(marker.args[0], []).extend(l.split("] ", 1)[1] for l in lines)


def pytest_terminal_summary(terminalreporter) -> None:
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        elif "failed" in got:
            status = "FAIL"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"criterion {n}: {status:7s} {text}")
        for d in _details.get(n, []):
            terminalreporter.write_line(f"    {d}")


_results: dict[str, object] = {}


@pytest.fixture(scope="session")
def bundled_results():
    """Each bundled scenario run once per session."""
    if not _results:
        for name in bundled_names():
            _results[name] = run(load_config(name))
    return dict(_results)
