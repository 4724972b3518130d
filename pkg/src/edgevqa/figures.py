"""Report figures rendered to files next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from edgevqa.evaluation import INFERENCE_STAGES, STAGE_LABELS, ScoreReport

_SAVEFIG = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def fig_stage_shares(report: ScoreReport, path: str | Path) -> Path:
    """Horizontal bars of the four pipeline stages' share of inference time."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 2.4))
    labels = [STAGE_LABELS[s] for s in INFERENCE_STAGES]
    shares = [report.stage_shares[s] for s in INFERENCE_STAGES]
    bars = ax.barh(labels, shares, color="#4878d0")
    for bar, share in zip(bars, shares):
        ax.text(bar.get_width() + 0.01, bar.get_y() + bar.get_height() / 2,
                f"{share:.1%}", va="center", fontsize=8)
    ax.set_xlim(0, 1.05)
    ax.set_xlabel("share of inference time")
    ax.set_title(f"Latency decomposition: {report.profile} ({report.deployment})", fontsize=10)
    ax.invert_yaxis()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def fig_accuracy_latency(reports: list[ScoreReport], path: str | Path) -> Path:
    """Accuracy (bars) and mean e2e latency (markers) per run."""
    path = Path(path)
    fig, ax_acc = plt.subplots(figsize=(6, 3.2))
    names = [f"{r.profile}\n({r.deployment})" for r in reports]
    xs = range(len(reports))
    ax_acc.bar(xs, [r.accuracy for r in reports], width=0.5, color="#6acc64", label="accuracy")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.0)
    ax_acc.set_xticks(list(xs))
    ax_acc.set_xticklabels(names, fontsize=8)
    ax_lat = ax_acc.twinx()
    ax_lat.plot(
        list(xs), [r.latency.mean_ms for r in reports],
        "D-", color="#d65f5f", label="mean e2e (ms)",
    )
    ax_lat.set_ylabel("mean e2e latency (ms)")
    ax_lat.set_ylim(bottom=0)
    for x, r in zip(xs, reports):
        ax_lat.annotate(f"{r.latency.mean_ms:.0f}", (x, r.latency.mean_ms),
                        textcoords="offset points", xytext=(0, 6), fontsize=8, ha="center")
    ax_acc.set_title("Accuracy and latency per deployment", fontsize=10)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def fig_per_category(report: ScoreReport, path: str | Path) -> Path:
    """Per-category accuracy bars (radar-chart stand-in)."""
    path = Path(path)
    cats = sorted(report.per_category_accuracy)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(cats)), 3.2))
    ax.bar(cats, [report.per_category_accuracy[c] for c in cats], color="#956cb4", width=0.5)
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("accuracy")
    ax.set_title(f"Per-category accuracy: {report.profile} ({report.deployment})", fontsize=10)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right", fontsize=8)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path
