"""Shared fixtures and the acceptance summary.

Tests marked ``acceptance("<criterion>")`` are collected into a one-line
PASS/FAIL summary printed at the end of the run. A test may attach a short
measurement through ``record_property("detail", ...)``.

The desk-scale benchmark (full pipeline plus three ablations over three
seeds) takes on the order of an hour on a CPU. It runs at most once per
session. Set ``ASSL_DESK_DIR`` to a directory to keep its results between
sessions; a later session with the same config reloads them.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

DESK_SEEDS = (0, 1, 2)

_results: dict[str, list[tuple[str, str, str]]] = {}



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _results.setdefault(mark.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, runs in _results.items():
        status = "PASS" if all(s == "PASS" for _, s, _ in runs) else next(s for _, s, _ in runs if s != "PASS")
        details = "; ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({details})" if details else ""))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk-scale results: ``{"pipeline": {seed: {...}}, "tables": {name: dict}}``."""
    from agnostic_ssl.desk import run_desk

    root = os.environ.get("ASSL_DESK_DIR")
    out = Path(root) if root else tmp_path_factory.mktemp("desk")
    return run_desk(out, DESK_SEEDS)
