"""--spawn orchestration: components as OS processes instead of tasks.

The signaling server and gateway run via their own CLI subcommands; the
robot replay stays in-process. Readiness is detected from each child's
startup line, and media/data ports are negotiated in-band as usual.
"""

from __future__ import annotations

import asyncio
import logging
import re
import subprocess
import sys
import time
from pathlib import Path

from edgevqa.bench import (
    BenchConfig,
    BenchResult,
    ProfileRun,
    _comparable_pairs,
    _write_run_manifest,
    resolve_dataset,
    score_replay,
)
from edgevqa.backends import ProfileRegistry
from edgevqa.dataset import emit_dataset
from edgevqa.evaluation import compare_deployments, emit_comparison, emit_report
from edgevqa.robot_sim import ReplayPlan, RobotSimulator, write_predictions

logger = logging.getLogger(__name__)

_PORT_RE = re.compile(r"listening on [^:]+:(\d+)")


class SpawnError(Exception):
    pass


def _launch(argv: list[str], ready_re: re.Pattern | None, timeout: float = 15.0):
    proc = subprocess.Popen(
        [sys.executable, "-m", "edgevqa.cli", *argv],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    deadline = time.monotonic() + timeout
    line = ""
    while time.monotonic() < deadline:
        line = proc.stdout.readline()
        if not line:
            if proc.poll() is not None:
                raise SpawnError(f"{argv[0]} exited with {proc.returncode}")
            continue
        logger.debug("[%s] %s", argv[0], line.rstrip())
        if ready_re is None or ready_re.search(line):
            return proc, line
    proc.kill()
    raise SpawnError(f"{argv[0]} did not become ready within {timeout}s")


def _stop(proc: subprocess.Popen) -> None:
    if proc.poll() is None:
        proc.terminate()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()


def run_benchmark_spawned(cfg: BenchConfig) -> BenchResult:
    cfg.validate()
    registry = ProfileRegistry(tuple(cfg.profile_dirs))
    for _, name in cfg.profiles:
        registry.get(name)
    manifest = resolve_dataset(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_path = emit_dataset(manifest, out / "dataset.jsonl")
    runs: list[ProfileRun] = []
    for deployment, profile_name in cfg.profiles:
        run = ProfileRun(deployment=deployment, profile=profile_name)
        run_dir = out / f"{deployment}-{profile_name}"
        run_dir.mkdir(parents=True, exist_ok=True)
        signal_proc = gateway_proc = None
        try:
            signal_proc, line = _launch(
                ["signal-server", "--signal-port", "0"], _PORT_RE
            )
            port = int(_PORT_RE.search(line).group(1))
            gateway_args = [
                "gateway",
                "--signal", f"127.0.0.1:{port}",
                "--deployment", deployment,
                "--profile", profile_name,
                "--dataset", str(dataset_path),
                "--time-scale", str(cfg.time_scale),
                "--backend-timeout", str(cfg.backend_timeout_s),
            ]
            for directory in cfg.profile_dirs:
                gateway_args += ["--profile-dir", directory]
            gateway_proc, _ = _launch(gateway_args, re.compile(r"gateway .* up"))

            async def drive():
                robot = RobotSimulator("127.0.0.1", port)
                await robot.connect()
                try:
                    return await robot.run_replay(
                        ReplayPlan(manifest=manifest, fps=cfg.fps, schedule=cfg.schedule)
                    )
                finally:
                    await robot.close()

            replay = asyncio.run(drive())
            write_predictions(replay, run_dir / "preds.jsonl", run_dir / "traces.jsonl")
            run.replay = replay
            run.report = score_replay(
                manifest, replay, deployment=deployment, profile=profile_name,
                strict_mc=cfg.strict_mc,
            )
            for fmt in cfg.formats:
                emit_report(run.report, fmt, run_dir / f"report.{fmt}")
            run.files = {
                "preds": str(run_dir / "preds.jsonl"),
                "traces": str(run_dir / "traces.jsonl"),
                **{f"report_{fmt}": str(run_dir / f"report.{fmt}") for fmt in cfg.formats},
            }
        except Exception as e:
            logger.exception("spawned bench: %s/%s failed", deployment, profile_name)
            run.error = f"{type(e).__name__}: {e}"
        finally:
            for proc in (gateway_proc, signal_proc):
                if proc is not None:
                    _stop(proc)
        runs.append(run)
    comparisons = []
    for edge_run, cloud_run in _comparable_pairs(runs, registry):
        comparison = compare_deployments(edge_run.report, cloud_run.report)
        comparisons.append(comparison)
        stem = out / f"comparison-{edge_run.profile}-vs-{cloud_run.profile}"
        emit_comparison(comparison, "json", stem.with_suffix(".json"))
        emit_comparison(comparison, "md", stem.with_suffix(".md"))
    manifest_path = _write_run_manifest(cfg, manifest, dataset_path, runs, out)
    return BenchResult(runs=runs, comparisons=comparisons, output_dir=out, manifest_path=manifest_path)
