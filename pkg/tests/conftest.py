from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from seedshift import commands, config

_ACCEPTANCE: list[tuple[str, str, str]] = []


def record_criterion(label: str, ok: bool | None, detail: str) -> None:
    """Queue one line for the end-of-session acceptance summary; ``None`` marks a non-gating report."""
    verdict = "PASS" if ok else ("FAIL" if ok is False else "INFO")
    _ACCEPTANCE.append((label, verdict, detail))
    print(f"[{verdict}] {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict:4s}  {label}: {detail}")


@dataclass
class PipelineRun:
    out: Path
    cfg: config.RunConfig
    seconds: dict = field(default_factory=dict)


def run_pipeline(out: Path, cfg: config.RunConfig) -> PipelineRun:
    run = PipelineRun(out, cfg)
    for name, fn in (("train", lambda: commands.cmd_train(cfg, out)),
                     ("overlap", lambda: commands.cmd_overlap(cfg, out)),
                     ("sweep", lambda: commands.cmd_sweep(cfg, out)),
                     ("trajectory", lambda: commands.cmd_trajectory(cfg, out)),
                     ("report", lambda: commands.cmd_report(out))):
        t0 = time.perf_counter()
        fn()
        run.seconds[name] = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> PipelineRun:
    """The whole pipeline on the default configuration, run once per session."""
    return run_pipeline(tmp_path_factory.mktemp("default_run"), config.build({}))
