"""Scoring and statistics: exact-match accuracy, latency decomposition.

Accuracy uses exact match on normalized strings (lowercase, punctuation
stripped, whitespace collapsed). Aggregation keeps exact integer counts, so
accuracy is correct_count/n with no float accumulation, and percentiles are
nearest-rank.
"""

from __future__ import annotations

import csv
import io
import json
import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from edgevqa.dataset import DatasetItem
from edgevqa.trace import LatencyTrace

INFERENCE_STAGES = ("preprocess", "fusion", "generation", "text_decode")
STAGE_LABELS = {
    "preprocess": "image decode + preprocess",
    "fusion": "vision encode + fusion",
    "generation": "language generation",
    "text_decode": "text decode",
}
_ARTICLES = frozenset({"a", "an", "the"})


class EvaluationError(Exception):
    pass


class EmptyRun(EvaluationError):
    pass


class MismatchedRuns(EvaluationError):
    pass


def normalize_answer(s: str, strip_articles: bool = False) -> str:
    """Lowercase, drop Unicode punctuation, collapse whitespace, trim.

    Articles are kept by default; --normalize-articles flips strip_articles.
    """
    lowered = s.lower()
    chars = []
    for ch in lowered:
        if unicodedata.category(ch).startswith("P"):
            continue
        chars.append(" " if ch.isspace() else ch)
    collapsed = " ".join("".join(chars).split())
    if strip_articles:
        collapsed = " ".join(t for t in collapsed.split() if t not in _ARTICLES)
    return collapsed


def mc_index_label(index: int) -> str:
    """Positional option label: 0 -> 'a', 1 -> 'b', ..."""
    return chr(ord("a") + index)


def score_item(
    pred: str,
    item: DatasetItem,
    *,
    strict_mc: bool = False,
    strip_articles: bool = False,
) -> bool:
    """Exact match of normalized prediction against the gold answer.

    multiple_choice additionally accepts the option's positional label
    ("a"/"b"/...) when it maps to the gold choice, unless strict_mc is set.
    """
    norm = lambda s: normalize_answer(s, strip_articles=strip_articles)
    p = norm(pred)
    if p == norm(item.gold):
        return True
    if item.qtype == "multiple_choice" and not strict_mc and item.choices:
        for i, choice in enumerate(item.choices):
            if p == mc_index_label(i):
                return norm(choice) == norm(item.gold)
    return False


def nearest_rank(sorted_values: list[float], pct: float) -> float:
    """Nearest-rank percentile over an ascending list (pct in (0, 100])."""
    if not sorted_values:
        raise EmptyRun("percentile of empty run")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float

    def to_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
        }


@dataclass
class ScoreReport:
    n_items: int
    correct: int
    accuracy: float
    per_category_accuracy: dict[str, float]
    per_category_counts: dict[str, tuple[int, int]]  # category -> (correct, total)
    latency: LatencyStats
    stage_shares: dict[str, float]
    accuracy_per_ms: float
    deployment: str = ""
    profile: str = ""
    dataset: str = ""
    latency_basis: str = "simulated"

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "per_category_accuracy": self.per_category_accuracy,
            "per_category_counts": {k: list(v) for k, v in self.per_category_counts.items()},
            "latency": self.latency.to_dict(),
            "stage_shares": self.stage_shares,
            "accuracy_per_ms": self.accuracy_per_ms,
            "deployment": self.deployment,
            "profile": self.profile,
            "dataset": self.dataset,
            "latency_basis": self.latency_basis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(
            n_items=d["n_items"],
            correct=d["correct"],
            accuracy=d["accuracy"],
            per_category_accuracy=dict(d["per_category_accuracy"]),
            per_category_counts={k: tuple(v) for k, v in d["per_category_counts"].items()},
            latency=LatencyStats(**d["latency"]),
            stage_shares=dict(d["stage_shares"]),
            accuracy_per_ms=d["accuracy_per_ms"],
            deployment=d.get("deployment", ""),
            profile=d.get("profile", ""),
            dataset=d.get("dataset", ""),
            latency_basis=d.get("latency_basis", "simulated"),
        )


def aggregate(
    scores: list[bool],
    traces: list[LatencyTrace | None],
    categories: list[str | None],
    *,
    deployment: str = "",
    profile: str = "",
    dataset: str = "",
    latency_basis: str = "simulated",
) -> ScoreReport:
    """Fold per-item outcomes into one report; EmptyRun when there are none.

    Accuracy counts every item. Items without a trace (errored queries,
    offline predictions without timing) are excluded from the latency
    statistics only.
    """
    n = len(scores)
    if n == 0:
        raise EmptyRun("no items")
    if not (len(traces) == len(categories) == n):
        raise MismatchedRuns("scores/traces/categories differ in length")
    timed = [t for t in traces if t is not None]
    e2e_ms = [t.e2e_ms for t in timed]
    stage_durations_ms = [t.stage_durations_ms() for t in timed]
    correct = sum(1 for s in scores if s)
    accuracy = correct / n
    per_cat_counts: dict[str, list[int]] = {}
    for ok, cat in zip(scores, categories):
        if cat is None:
            cat = "uncategorized"
        bucket = per_cat_counts.setdefault(cat, [0, 0])
        bucket[0] += 1 if ok else 0
        bucket[1] += 1
    per_cat_acc = {cat: c / t for cat, (c, t) in per_cat_counts.items()}
    if e2e_ms:
        ordered = sorted(e2e_ms)
        latency = LatencyStats(
            mean_ms=sum(e2e_ms) / len(e2e_ms),
            p50_ms=nearest_rank(ordered, 50),
            p95_ms=nearest_rank(ordered, 95),
            min_ms=ordered[0],
            max_ms=ordered[-1],
        )
    else:
        latency = LatencyStats(0.0, 0.0, 0.0, 0.0, 0.0)
    stage_totals = {stage: 0.0 for stage in INFERENCE_STAGES}
    for durations in stage_durations_ms:
        for stage in INFERENCE_STAGES:
            stage_totals[stage] += durations.get(stage, 0.0)
    inference_total = sum(stage_totals.values())
    if inference_total > 0:
        shares = {stage: stage_totals[stage] / inference_total for stage in INFERENCE_STAGES}
    else:
        shares = {stage: 0.0 for stage in INFERENCE_STAGES}
    return ScoreReport(
        n_items=n,
        correct=correct,
        accuracy=accuracy,
        per_category_accuracy=per_cat_acc,
        per_category_counts={k: (v[0], v[1]) for k, v in per_cat_counts.items()},
        latency=latency,
        stage_shares=shares,
        accuracy_per_ms=accuracy / latency.mean_ms if latency.mean_ms > 0 else 0.0,
        deployment=deployment,
        profile=profile,
        dataset=dataset,
        latency_basis=latency_basis,
    )


@dataclass
class ComparisonReport:
    edge_profile: str
    cloud_profile: str
    latency_reduction_pct: float
    accuracy_delta: float
    winner_per_metric: dict[str, str]
    edge_mean_ms: float = 0.0
    cloud_mean_ms: float = 0.0
    edge_accuracy: float = 0.0
    cloud_accuracy: float = 0.0
    edge_accuracy_per_ms: float = 0.0
    cloud_accuracy_per_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "edge_profile": self.edge_profile,
            "cloud_profile": self.cloud_profile,
            "latency_reduction_pct": self.latency_reduction_pct,
            "accuracy_delta": self.accuracy_delta,
            "winner_per_metric": self.winner_per_metric,
            "edge_mean_ms": self.edge_mean_ms,
            "cloud_mean_ms": self.cloud_mean_ms,
            "edge_accuracy": self.edge_accuracy,
            "cloud_accuracy": self.cloud_accuracy,
            "edge_accuracy_per_ms": self.edge_accuracy_per_ms,
            "cloud_accuracy_per_ms": self.cloud_accuracy_per_ms,
        }


def compare_deployments(edge: ScoreReport, cloud: ScoreReport) -> ComparisonReport:
    """Edge-vs-cloud deltas; no clamping, negative reductions pass through."""
    if edge.n_items != cloud.n_items or edge.dataset != cloud.dataset:
        raise MismatchedRuns(
            f"edge run ({edge.dataset}, n={edge.n_items}) vs "
            f"cloud run ({cloud.dataset}, n={cloud.n_items})"
        )
    reduction = 100.0 * (cloud.latency.mean_ms - edge.latency.mean_ms) / cloud.latency.mean_ms
    delta = edge.accuracy - cloud.accuracy

    def winner(edge_v: float, cloud_v: float, higher_wins: bool) -> str:
        if edge_v == cloud_v:
            return "tie"
        return "edge" if (edge_v > cloud_v) == higher_wins else "cloud"

    return ComparisonReport(
        edge_profile=edge.profile,
        cloud_profile=cloud.profile,
        latency_reduction_pct=reduction,
        accuracy_delta=delta,
        winner_per_metric={
            "latency": winner(edge.latency.mean_ms, cloud.latency.mean_ms, higher_wins=False),
            "accuracy": winner(edge.accuracy, cloud.accuracy, higher_wins=True),
            "accuracy_per_ms": winner(edge.accuracy_per_ms, cloud.accuracy_per_ms, higher_wins=True),
        },
        edge_mean_ms=edge.latency.mean_ms,
        cloud_mean_ms=cloud.latency.mean_ms,
        edge_accuracy=edge.accuracy,
        cloud_accuracy=cloud.accuracy,
        edge_accuracy_per_ms=edge.accuracy_per_ms,
        cloud_accuracy_per_ms=cloud.accuracy_per_ms,
    )


def emit_report(report: ScoreReport, fmt: str, path: str | Path) -> Path:
    """Write a report file; deterministic byte output for a given report."""
    path = Path(path)
    if fmt == "json":
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        payload = _report_csv(report)
    elif fmt == "md":
        payload = _report_md(report)
    else:
        raise EvaluationError(f"unknown report format {fmt!r}")
    try:
        path.write_text(payload, encoding="utf-8")
    except OSError as e:
        raise EvaluationError(f"cannot write {path}: {e}") from None
    return path


def _report_csv(report: ScoreReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["category", "correct", "total", "accuracy"])
    for cat in sorted(report.per_category_counts):
        correct, total = report.per_category_counts[cat]
        writer.writerow([cat, correct, total, f"{correct / total:.6f}"])
    writer.writerow(["__overall__", report.correct, report.n_items, f"{report.accuracy:.6f}"])
    return out.getvalue()


def _report_md(report: ScoreReport) -> str:
    lines = [
        f"# Run report: {report.profile} ({report.deployment})",
        "",
        f"- dataset: {report.dataset}",
        f"- items: {report.n_items}",
        f"- accuracy: {report.accuracy:.4f} ({report.correct}/{report.n_items})",
        f"- mean e2e: {report.latency.mean_ms:.2f} ms ({report.latency_basis})",
        f"- p50/p95: {report.latency.p50_ms:.2f} / {report.latency.p95_ms:.2f} ms",
        f"- accuracy per ms: {report.accuracy_per_ms:.3e}",
        "",
        "## Stage shares (fraction of inference time)",
        "",
        "| stage | share |",
        "|---|---|",
    ]
    for stage in INFERENCE_STAGES:
        lines.append(f"| {STAGE_LABELS[stage]} | {report.stage_shares[stage]:.4f} |")
    lines += ["", "## Per-category accuracy", "", "| category | correct | total | accuracy |", "|---|---|---|---|"]
    for cat in sorted(report.per_category_counts):
        correct, total = report.per_category_counts[cat]
        lines.append(f"| {cat} | {correct} | {total} | {correct / total:.4f} |")
    return "\n".join(lines) + "\n"


def emit_comparison(comparison: ComparisonReport, fmt: str, path: str | Path) -> Path:
    path = Path(path)
    if fmt == "json":
        payload = json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "md":
        payload = "\n".join(
            [
                f"# Edge vs cloud: {comparison.edge_profile} / {comparison.cloud_profile}",
                "",
                f"- latency reduction: {comparison.latency_reduction_pct:.2f}%"
                f" ({comparison.cloud_mean_ms:.2f} ms -> {comparison.edge_mean_ms:.2f} ms)",
                f"- accuracy delta (edge - cloud): {comparison.accuracy_delta:+.4f}",
                f"- winners: {json.dumps(comparison.winner_per_metric, sort_keys=True)}",
            ]
        ) + "\n"
    else:
        raise EvaluationError(f"unknown comparison format {fmt!r}")
    path.write_text(payload, encoding="utf-8")
    return path
