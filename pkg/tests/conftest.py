"""Shared end-to-end pipeline runs.

The expensive CLI pipelines (6-cycle learning and leave-one-out training) are
run once per session and reused by the acceptance suite and the unit tests
that need a trained ensemble. Every run happens inside its own directory with
relative paths so two runs can be compared byte for byte.
"""
from __future__ import annotations

import contextlib
import io
import json
import os
import time
from pathlib import Path

import pytest

from qtransfer.cli import run

CYCLES = (6, 8, 10, 12, 14)
ACCEPTANCE_LINES: list[str] = []


def run_cli(workdir: Path, *argv: str) -> dict:
    """Run one CLI command inside ``workdir`` and return its JSON summary."""
    buf = io.StringIO()
    old = os.getcwd()
    os.chdir(workdir)
    try:
        with contextlib.redirect_stdout(buf):
            code = run(list(argv))
    finally:
        os.chdir(old)
    summary = json.loads(buf.getvalue().strip().splitlines()[-1])
    if code != 0:
        raise AssertionError(f"qtransfer {' '.join(argv)} exited {code}: {summary}")
    return summary


def crossover_pipeline(workdir: Path) -> dict:
    start = time.perf_counter()
    summary = run_cli(workdir, "sweep", "--graph", "cycle:6", "--grid", "101", "--out", "eff.csv")
    return {"dir": workdir, "summary": summary, "seconds": time.perf_counter() - start,
            "files": ["eff.csv", "eff.csv.meta.json", "eff.csv.summary.json"]}


def six_cycle_pipeline(workdir: Path) -> dict:
    start = time.perf_counter()
    gen = run_cli(workdir, "gen-data", "--graphs", "cycle:6", "--samples", "1000", "--seed", "42",
                  "--out", "six.jsonl")
    train = run_cli(workdir, "train", "--data", "six.jsonl", "--ensemble", "5", "--seed", "0",
                    "--out", "six.model.json")
    ev = run_cli(workdir, "eval", "--model", "six.model.json", "--graph", "cycle:6", "--grid", "101",
                 "--out", "six.curve.csv")
    return {"dir": workdir, "gen": gen, "train": train, "eval": ev, "model": "six.model.json",
            "seconds": time.perf_counter() - start,
            "files": ["six.jsonl", "six.jsonl.report.json", "six.model.json",
                      "six.curve.csv", "six.curve.csv.meta.json"]}


def leave_one_out_pipeline(workdir: Path) -> dict:
    start = time.perf_counter()
    graphs = ",".join(f"cycle:{n}" for n in CYCLES)
    gen = run_cli(workdir, "gen-data", "--graphs", graphs, "--samples", "100", "--seed", "7",
                  "--out", "cycles.jsonl")
    train = run_cli(workdir, "train", "--data", "cycles.jsonl", "--exclude", "cycle:10",
                    "--ensemble", "5", "--seed", "0", "--out", "loo.model.json")
    ev = run_cli(workdir, "eval", "--model", "loo.model.json", "--graph", "cycle:10", "--grid", "101",
                 "--compare-truth", "--out", "loo.curve.csv")
    return {"dir": workdir, "gen": gen, "train": train, "eval": ev, "model": "loo.model.json",
            "seconds": time.perf_counter() - start,
            "files": ["cycles.jsonl", "cycles.jsonl.report.json", "loo.model.json",
                      "loo.curve.csv", "loo.curve.csv.meta.json"]}


@pytest.fixture(scope="session")
def crossover_run(tmp_path_factory):
    return crossover_pipeline(tmp_path_factory.mktemp("crossover"))


@pytest.fixture(scope="session")
def six_cycle_run(tmp_path_factory):
    return six_cycle_pipeline(tmp_path_factory.mktemp("six_cycle"))


@pytest.fixture(scope="session")
def leave_one_out_run(tmp_path_factory):
    return leave_one_out_pipeline(tmp_path_factory.mktemp("leave_one_out"))


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; lines are echoed now and again in the summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
