"""Recall@k evaluation, description-length error binning, and comparison
tables across retrieval configurations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import EntityCorpus, MentionRecord
from .matcher import RetrievalResult
from .views import ViewSet

__all__ = [
    "DEFAULT_KS",
    "EvalReport",
    "LengthBinRow",
    "recall_at_k",
    "length_binned_errors",
    "compare_configs",
    "write_report_records",
    "read_report_records",
]

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 50, 64)


@dataclass
class EvalReport:
    """Recall@k values for one configuration, micro-averaged over mentions."""

    label: str
    mention_count: int
    recall: dict[int, float]

    def __post_init__(self) -> None:
        ks = list(self.recall)
        if ks != sorted(ks):
            raise ValueError("recall keys must be ascending k values")


@dataclass
class LengthBinRow:
    """Error rate at one k for mentions whose gold entity falls in a
    description-length bin of ``[lo, hi)`` sentences."""

    lo: int
    hi: int
    mention_count: int
    error_rate: float
    k: int


def _gold_ranks(
    results: list[RetrievalResult], mentions: list[MentionRecord]
) -> dict[str, int | None]:
    """0-based rank of the gold entity per mention (None when absent)."""
    gold = {m.mention_id: m.gold_entity_id for m in mentions}
    if len(gold) != len(mentions):
        raise ValueError("duplicate mention_id in mentions")
    by_id = {r.mention_id: r for r in results}
    missing = [mid for mid in gold if mid not in by_id]
    if missing:
        raise ValueError(f"no retrieval result for mention {missing[0]!r}")
    extra = [mid for mid in by_id if mid not in gold]
    if extra:
        raise ValueError(f"retrieval result for unknown mention {extra[0]!r}")
    ranks: dict[str, int | None] = {}
    for mid, gid in gold.items():
        ids = by_id[mid].entity_ids()
        ranks[mid] = ids.index(gid) if gid in ids else None
    return ranks


def recall_at_k(
    results: list[RetrievalResult],
    mentions: list[MentionRecord],
    ks=DEFAULT_KS,
    label: str = "",
) -> EvalReport:
    """Fraction of mentions whose gold entity appears within the top k."""
    if not mentions:
        raise ValueError("need at least one mention to evaluate")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1:
        raise ValueError("k values must be >= 1")
    ranks = _gold_ranks(results, mentions)
    n = len(mentions)
    recall = {
        k: sum(1 for r in ranks.values() if r is not None and r < k) / n for k in ks
    }
    return EvalReport(label=label, mention_count=n, recall=recall)


def length_binned_errors(
    results: list[RetrievalResult],
    mentions: list[MentionRecord],
    corpus: EntityCorpus,
    viewsets: list[ViewSet],
    k: int,
    bin_size: int = 5,
) -> list[LengthBinRow]:
    """Error rate (1 - recall@k) binned by the gold entity's sentence count.

    Bins are fixed-width ``[b*bin_size, (b+1)*bin_size)``; empty bins are
    omitted. Each mention is attributed to its gold entity's bin.
    """
    if bin_size < 1:
        raise ValueError("bin_size must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    sentence_counts = {vs.entity_id: vs.sentence_count() for vs in viewsets}
    for m in mentions:
        if m.gold_entity_id not in corpus:
            raise ValueError(f"mention {m.mention_id!r}: gold entity not in corpus")
        if m.gold_entity_id not in sentence_counts:
            raise ValueError(f"mention {m.mention_id!r}: gold entity has no view set")
    ranks = _gold_ranks(results, mentions)
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for m in mentions:
        b = sentence_counts[m.gold_entity_id] // bin_size
        totals[b] = totals.get(b, 0) + 1
        r = ranks[m.mention_id]
        if r is not None and r < k:
            hits[b] = hits.get(b, 0) + 1
    rows = []
    for b in sorted(totals):
        n = totals[b]
        rows.append(LengthBinRow(
            lo=b * bin_size,
            hi=(b + 1) * bin_size,
            mention_count=n,
            error_rate=1.0 - hits.get(b, 0) / n,
            k=k,
        ))
    return rows


def compare_configs(reports: list[EvalReport]) -> str:
    """Aligned recall@k table, one column per config, deltas vs the first."""
    if not reports:
        raise ValueError("need at least one report")
    ks = list(reports[0].recall)
    for r in reports[1:]:
        if list(r.recall) != ks:
            raise ValueError(
                f"report {r.label!r} has k list {list(r.recall)}, expected {ks}"
            )
    base = reports[0]
    headers = ["k"] + [r.label or f"config{i}" for i, r in enumerate(reports)]
    for r in reports[1:]:
        headers.append(f"d({r.label or 'config'})")
    lines = []
    rows: list[list[str]] = []
    for k in ks:
        row = [str(k)] + [f"{r.recall[k]:.4f}" for r in reports]
        for r in reports[1:]:
            row.append(f"{r.recall[k] - base.recall[k]:+.4f}")
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    counts = ", ".join(f"{r.label or 'config'}: {r.mention_count}" for r in reports)
    lines.append(f"mentions  {counts}")
    return "\n".join(lines)


def write_report_records(
    path: str | Path,
    reports: list[EvalReport],
    bins_by_label: dict[str, list[LengthBinRow]] | None = None,
) -> None:
    """Structured line-delimited report for downstream plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            for k, value in r.recall.items():
                fh.write(json.dumps({
                    "type": "recall",
                    "config": r.label,
                    "k": k,
                    "recall": value,
                    "mentions": r.mention_count,
                }) + "\n")
        for label, rows in (bins_by_label or {}).items():
            for row in rows:
                fh.write(json.dumps({
                    "type": "length_bin",
                    "config": label,
                    "lo": row.lo,
                    "hi": row.hi,
                    "mentions": row.mention_count,
                    "error_rate": row.error_rate,
                    "k": row.k,
                }) + "\n")


def read_report_records(path: str | Path) -> tuple[list[EvalReport], dict[str, list[LengthBinRow]]]:
    recalls: dict[str, dict[int, float]] = {}
    counts: dict[str, int] = {}
    bins: dict[str, list[LengthBinRow]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            if rec["type"] == "recall":
                recalls.setdefault(rec["config"], {})[rec["k"]] = rec["recall"]
                counts[rec["config"]] = rec["mentions"]
            elif rec["type"] == "length_bin":
                bins.setdefault(rec["config"], []).append(LengthBinRow(
                    lo=rec["lo"], hi=rec["hi"], mention_count=rec["mentions"],
                    error_rate=rec["error_rate"], k=rec["k"],
                ))
    reports = [
        EvalReport(label=label, mention_count=counts[label],
                   recall=dict(sorted(kv.items())))
        for label, kv in recalls.items()
    ]
    return reports, bins
