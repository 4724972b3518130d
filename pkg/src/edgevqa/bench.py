"""Benchmark orchestrator: signaling + gateway + replay + scoring per profile.

Each profile entry gets a fresh signaling server, gateway, and backend on
ephemeral ports; the replay drives the full media/data path; scoring uses
the deterministic simulated traces so repeated runs with one config+seed
produce byte-identical reports. Artifacts (dataset copy, predictions,
wall-clock traces, reports, figures, run manifest) land under output_dir.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from edgevqa import __version__
from edgevqa.backends import ProfileRegistry
from edgevqa.dataset import (
    DatasetManifest,
    emit_dataset,
    generate_synthetic_manifest,
    load_dataset,
    make_answer_table,
)
from edgevqa.evaluation import (
    ComparisonReport,
    ScoreReport,
    aggregate,
    compare_deployments,
    emit_comparison,
    emit_report,
    score_item,
)
from edgevqa.gateway import GatewayConfig, GatewayService
from edgevqa.robot_sim import ReplayPlan, ReplayResult, RobotSimulator, write_predictions
from edgevqa.signaling import SignalingServer
from edgevqa.trace import LatencyTrace

logger = logging.getLogger(__name__)

DEFAULT_PROFILES = (("edge", "edge-llama"), ("cloud", "cloud-llama"), ("edge", "edge-qwen"))


class ConfigError(Exception):
    pass


@dataclass
class BenchConfig:
    dataset: str | None = None  # path to JSONL; None -> synthetic
    synthetic_schema: str = "robo2vlm"
    synthetic_items: int = 200
    synthetic_image: tuple[int, int] = (64, 64)
    profiles: list[tuple[str, str]] = field(default_factory=lambda: list(DEFAULT_PROFILES))
    seed: int = 42
    fps: float = 10.0
    schedule: str = "per_frame"
    output_dir: str = "bench-out"
    formats: list[str] = field(default_factory=lambda: ["json", "csv", "md"])
    figures: bool = True
    time_scale: float = 1.0
    profile_dirs: tuple[str, ...] = ()
    strict_mc: bool = False
    backend_timeout_s: float = 30.0
    spawn: bool = False

    def validate(self) -> None:
        if not self.profiles:
            raise ConfigError("config needs at least one (deployment, profile) entry")
        for deployment, name in self.profiles:
            if deployment not in ("edge", "cloud"):
                raise ConfigError(f"deployment must be edge or cloud, got {deployment!r}")
            if not name:
                raise ConfigError("profile name must be non-empty")
        if self.dataset is None and self.synthetic_items < 1:
            raise ConfigError("synthetic dataset needs at least one item")
        if self.time_scale < 0:
            raise ConfigError("time_scale must be >= 0")
        unknown = set(self.formats) - {"json", "csv", "md"}
        if unknown:
            raise ConfigError(f"unknown report formats: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**{k: v for k, v in d.items()})
        cfg.profiles = [tuple(p) for p in cfg.profiles]
        cfg.synthetic_image = tuple(cfg.synthetic_image)
        cfg.profile_dirs = tuple(cfg.profile_dirs)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchConfig":
        path = Path(path)
        raw = path.read_bytes()
        if path.suffix == ".json":
            data = json.loads(raw)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib

            try:
                data = tomllib.loads(raw.decode("utf-8"))
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a table/object")
        return cls.from_dict(data.get("bench", data))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "synthetic_schema": self.synthetic_schema,
            "synthetic_items": self.synthetic_items,
            "synthetic_image": list(self.synthetic_image),
            "profiles": [list(p) for p in self.profiles],
            "seed": self.seed,
            "fps": self.fps,
            "schedule": self.schedule,
            "output_dir": self.output_dir,
            "formats": self.formats,
            "figures": self.figures,
            "time_scale": self.time_scale,
            "profile_dirs": list(self.profile_dirs),
            "strict_mc": self.strict_mc,
            "backend_timeout_s": self.backend_timeout_s,
            "spawn": self.spawn,
        }


@dataclass
class ProfileRun:
    deployment: str
    profile: str
    report: ScoreReport | None = None
    replay: ReplayResult | None = None
    error: str | None = None
    files: dict[str, str] = field(default_factory=dict)


@dataclass
class BenchResult:
    runs: list[ProfileRun]
    comparisons: list[ComparisonReport]
    output_dir: Path
    manifest_path: Path

    def report_for(self, deployment: str, profile: str) -> ScoreReport:
        for run in self.runs:
            if run.deployment == deployment and run.profile == profile and run.report:
                return run.report
        raise KeyError(f"no report for ({deployment}, {profile})")


def resolve_dataset(cfg: BenchConfig) -> DatasetManifest:
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    return generate_synthetic_manifest(
        cfg.synthetic_schema, cfg.synthetic_items, cfg.seed, image_size=cfg.synthetic_image
    )


def score_replay(
    manifest: DatasetManifest,
    replay: ReplayResult,
    *,
    deployment: str,
    profile: str,
    strict_mc: bool = False,
) -> ScoreReport:
    """Score outcomes in dataset order; errored items count as incorrect."""
    by_item = {o.item_id: o for o in replay.outcomes}
    scores: list[bool] = []
    traces: list[LatencyTrace | None] = []
    categories: list[str | None] = []
    for item in manifest.items:
        outcome = by_item.get(item.id)
        categories.append(item.category)
        if outcome is None or not outcome.ok:
            scores.append(False)
            traces.append(None)
            continue
        scores.append(score_item(outcome.answer.text, item, strict_mc=strict_mc))
        traces.append(LatencyTrace.from_durations_ms(outcome.answer.sim_durations_ms))
    return aggregate(
        scores,
        traces,
        categories,
        deployment=deployment,
        profile=profile,
        dataset=manifest.name,
        latency_basis="simulated",
    )


async def run_profile(
    cfg: BenchConfig, manifest: DatasetManifest, deployment: str, profile_name: str, run_dir: Path
) -> tuple[ScoreReport, ReplayResult]:
    """One fresh signaling+gateway+robot stack, full replay, scored report."""
    run_dir.mkdir(parents=True, exist_ok=True)
    server = SignalingServer(port=0)
    await server.start()
    gateway = GatewayService(
        GatewayConfig(
            signal_port=server.port,
            deployment=deployment,
            profile=profile_name,
            profile_dirs=cfg.profile_dirs,
            time_scale=cfg.time_scale,
            backend_timeout_s=cfg.backend_timeout_s,
        ),
        answer_table=make_answer_table(manifest),
    )
    robot = RobotSimulator("127.0.0.1", server.port)
    try:
        await gateway.start()
        await robot.connect()
        replay = await robot.run_replay(
            ReplayPlan(manifest=manifest, fps=cfg.fps, schedule=cfg.schedule)
        )
    finally:
        await robot.close()
        await gateway.stop()
        await server.stop()
    write_predictions(replay, run_dir / "preds.jsonl", run_dir / "traces.jsonl")
    report = score_replay(
        manifest, replay, deployment=deployment, profile=profile_name, strict_mc=cfg.strict_mc
    )
    for fmt in cfg.formats:
        emit_report(report, fmt, run_dir / f"report.{fmt}")
    if cfg.figures:
        from edgevqa import figures

        figures.fig_stage_shares(report, run_dir / "stage_shares.png")
        figures.fig_per_category(report, run_dir / "category_accuracy.png")
    return report, replay


async def run_benchmark_async(cfg: BenchConfig) -> BenchResult:
    cfg.validate()
    registry = ProfileRegistry(tuple(cfg.profile_dirs))
    for _, name in cfg.profiles:
        registry.get(name)  # fail fast on unknown profiles
    manifest = resolve_dataset(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_path = emit_dataset(manifest, out / "dataset.jsonl")
    runs: list[ProfileRun] = []
    for deployment, profile_name in cfg.profiles:
        run = ProfileRun(deployment=deployment, profile=profile_name)
        run_dir = out / f"{deployment}-{profile_name}"
        logger.info("bench: running %s/%s (%d items)", deployment, profile_name, len(manifest))
        try:
            run.report, run.replay = await run_profile(
                cfg, manifest, deployment, profile_name, run_dir
            )
            run.files = {
                "preds": str(run_dir / "preds.jsonl"),
                "traces": str(run_dir / "traces.jsonl"),
                **{f"report_{fmt}": str(run_dir / f"report.{fmt}") for fmt in cfg.formats},
            }
        except Exception as e:
            logger.exception("bench: %s/%s failed", deployment, profile_name)
            run.error = f"{type(e).__name__}: {e}"
        runs.append(run)
    comparisons = []
    for edge_run, cloud_run in _comparable_pairs(runs, registry):
        comparison = compare_deployments(edge_run.report, cloud_run.report)
        comparisons.append(comparison)
        stem = out / f"comparison-{edge_run.profile}-vs-{cloud_run.profile}"
        emit_comparison(comparison, "json", stem.with_suffix(".json"))
        emit_comparison(comparison, "md", stem.with_suffix(".md"))
    if cfg.figures and any(r.report for r in runs):
        from edgevqa import figures

        figures.fig_accuracy_latency([r.report for r in runs if r.report], out / "accuracy_latency.png")
    manifest_path = _write_run_manifest(cfg, manifest, dataset_path, runs, out)
    return BenchResult(runs=runs, comparisons=comparisons, output_dir=out, manifest_path=manifest_path)


def _comparable_pairs(runs: list[ProfileRun], registry: ProfileRegistry):
    by_family: dict[str, dict[str, ProfileRun]] = {}
    for run in runs:
        if run.report is None:
            continue
        family = registry.get(run.profile).family
        by_family.setdefault(family, {})[run.deployment] = run
    for family in sorted(by_family):
        pair = by_family[family]
        if "edge" in pair and "cloud" in pair:
            yield pair["edge"], pair["cloud"]


def _write_run_manifest(
    cfg: BenchConfig, manifest: DatasetManifest, dataset_path: Path, runs: list[ProfileRun], out: Path
) -> Path:
    digest = hashlib.sha256(dataset_path.read_bytes()).hexdigest()
    payload = {
        "config": cfg.to_dict(),
        "dataset": {"name": manifest.name, "schema": manifest.schema,
                    "n_items": len(manifest), "sha256": digest,
                    "path": str(dataset_path)},
        "versions": {
            "edgevqa": __version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "runs": [
            {
                "deployment": r.deployment,
                "profile": r.profile,
                "error": r.error,
                "files": r.files,
                "accuracy": r.report.accuracy if r.report else None,
                "mean_e2e_ms": r.report.latency.mean_ms if r.report else None,
            }
            for r in runs
        ],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    return asyncio.run(run_benchmark_async(cfg))


def load_predictions(path: str | Path) -> list[dict]:
    lines = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                lines.append(json.loads(line))
    return lines


def score_predictions_file(
    preds_path: str | Path,
    manifest: DatasetManifest,
    *,
    strict_mc: bool = False,
    strip_articles: bool = False,
    deployment: str = "",
    profile: str = "",
) -> ScoreReport:
    """Offline scorer for a predictions JSONL ({id, pred, trace?} per line)."""
    preds = {p["id"]: p for p in load_predictions(preds_path)}
    scores: list[bool] = []
    traces: list[LatencyTrace | None] = []
    categories: list[str | None] = []
    for item in manifest.items:
        pred = preds.get(item.id)
        categories.append(item.category)
        if pred is None or "pred" not in pred:
            scores.append(False)
            traces.append(None)
            continue
        scores.append(
            score_item(pred["pred"], item, strict_mc=strict_mc, strip_articles=strip_articles)
        )
        traces.append(LatencyTrace.from_json(pred["trace"]) if pred.get("trace") else None)
    return aggregate(
        scores, traces, categories,
        deployment=deployment, profile=profile, dataset=manifest.name,
        latency_basis="simulated",
    )
