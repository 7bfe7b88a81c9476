"""Figure rendering for evaluation reports.

Kept separate from the evaluator so metric computation stays free of any
plotting dependency; the CLI report path calls these after writing the
delimited records.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import EvalReport, LengthBinRow

__all__ = ["plot_recall_curves", "plot_length_bins"]


def plot_recall_curves(reports: list[EvalReport], path: str | Path) -> Path:
    """Recall@k per configuration on a log2 k axis."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for report in reports:
        ks = list(report.recall)
        ax.plot(ks, [report.recall[k] for k in ks], marker="o",
                label=report.label or "config")
    ax.set_xscale("log", base=2)
    ax.set_xticks(list(reports[0].recall))
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_length_bins(
    bins_by_label: dict[str, list[LengthBinRow]], path: str | Path
) -> Path:
    """Grouped bars: error rate per description-length bin per config."""
    labels = list(bins_by_label)
    all_bins = sorted({(row.lo, row.hi) for rows in bins_by_label.values() for row in rows})
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    width = 0.8 / max(len(labels), 1)
    for i, label in enumerate(labels):
        by_bin = {(row.lo, row.hi): row.error_rate for row in bins_by_label[label]}
        xs = [b + i * width for b in range(len(all_bins))]
        ys = [by_bin.get(bin_key, 0.0) for bin_key in all_bins]
        ax.bar(xs, ys, width=width, label=label or "config")
    ax.set_xticks([b + 0.4 - width / 2 for b in range(len(all_bins))])
    ax.set_xticklabels([f"[{lo},{hi})" for lo, hi in all_bins])
    ax.set_xlabel("gold description length (sentences)")
    ax.set_ylabel("error rate")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
