"""Ranked-retrieval and set-answer scoring.

All retrieval metrics use binary relevance and return fractions in [0, 1].
Rankings are sequences of distinct doc ids, best first; relevance is a set of
ids. Answer metrics compare letter sets with no partial credit for exact
match and standard set precision/recall/F1 otherwise.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

from .errors import ReportError

GROUP_KEYS = ("none", "category", "secondary_category", "strategy")


def _check_ranking(ranked: Sequence[str]) -> None:
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranking contains duplicate doc ids")


def _check_relevant(relevant: Iterable[str]) -> set[str]:
    rel = set(relevant)
    if not rel:
        raise ValueError("relevant set is empty; recall/nDCG are undefined")
    return rel


def recall_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """|top-k hits| / |relevant|."""
    rel = _check_relevant(relevant)
    _check_ranking(ranked)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = sum(1 for d in ranked[:k] if d in rel)
    return hits / len(rel)


def precision_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """|top-k hits| / k; the denominator stays k even for short rankings."""
    rel = set(relevant)
    _check_ranking(ranked)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = sum(1 for d in ranked[:k] if d in rel)
    return hits / k


def ndcg_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """Binary-gain nDCG with 1-based positions: gain 1/log2(i+1).

    The ideal DCG places min(|relevant|, k) hits at the top positions.
    """
    rel = _check_relevant(relevant)
    _check_ranking(ranked)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dcg = 0.0
    for i, doc_id in enumerate(ranked[:k], start=1):
        if doc_id in rel:
            dcg += 1.0 / math.log2(i + 1)
    ideal_hits = min(len(rel), k)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, ideal_hits + 1))
    return dcg / idcg


def exact_match(pred: Iterable[str], gold: Iterable[str]) -> float:
    """1.0 when the sets are equal, else 0.0; no partial credit."""
    return 1.0 if set(pred) == set(gold) else 0.0


def prf1(pred: Iterable[str], gold: Iterable[str]) -> tuple[float, float, float]:
    """Set precision, recall, F1 over answer letters.

    Empty prediction scores zero precision by definition. Gold must be
    non-empty (validated answer keys always are).
    """
    pred = set(pred)
    gold = set(gold)
    if not gold:
        raise ValueError("gold answer set is empty")
    if not pred:
        return 0.0, 0.0, 0.0
    overlap = len(pred & gold)
    p = overlap / len(pred)
    r = overlap / len(gold)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def selection_tendency(pred: Iterable[str], gold: Iterable[str]) -> str:
    """Classify a parsed answer as over/under/exact/mixed selection.

    over: strict superset of gold; under: strict non-empty subset;
    exact: equal; mixed: anything else. Callers must not pass parse
    failures (empty predictions) here.
    """
    pred = set(pred)
    gold = set(gold)
    if not pred:
        raise ValueError("selection tendency is undefined for an empty prediction")
    if pred == gold:
        return "exact"
    if pred > gold:
        return "over"
    if pred < gold:
        return "under"
    return "mixed"


def aggregate(
    rows: Sequence[Mapping],
    group_by: str = "none",
    fields: Sequence[str] | None = None,
) -> dict[str, dict]:
    """Macro-average numeric fields over record rows, keyed by group.

    ``group_by`` is one of ``none``, ``category``, ``secondary_category``,
    ``strategy``; rows missing the group key fall into the group ``"-"``
    and ungrouped aggregation lands under ``"all"``. Each group entry
    carries the member count plus the field means. When ``fields`` is
    omitted, every key holding a number in all rows (bool excluded) is
    averaged.
    """
    if not rows:
        raise ReportError("aggregate() needs at least one row")
    if group_by not in GROUP_KEYS:
        raise ReportError(f"unknown group_by {group_by!r}, expected one of {GROUP_KEYS}")

    if fields is None:
        fields = sorted(
            k
            for k in rows[0]
            if all(
                isinstance(r.get(k), (int, float)) and not isinstance(r.get(k), bool)
                for r in rows
            )
        )

    groups: dict[str, list[Mapping]] = {}
    for row in rows:
        key = "all" if group_by == "none" else str(row.get(group_by) or "-")
        groups.setdefault(key, []).append(row)

    out: dict[str, dict] = {}
    for key in sorted(groups):
        members = groups[key]
        entry: dict = {"count": len(members)}
        for f in fields:
            entry[f] = sum(float(m[f]) for m in members) / len(members)
        out[key] = entry
    return out
