"""Ranking results and top-k metrics.

Distances between articles are topical: d(a, b) = 1 when the two articles
carry different topic ids, else 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LENGTH_BUCKETS = ("1", "2", "3", "4", "5+")


@dataclass
class RankingResult:
    session_key: str
    ranked: list[int]              # top-k article ids, best first
    label: int
    label_rank: int | None         # 1-based rank in the full ranking, None if not rankable
    prefix: list[int] = field(default_factory=list)
    cold: bool = False

    @property
    def prefix_len(self) -> int:
        return len(self.prefix)


def _hit_rank(r: RankingResult, k: int) -> int | None:
    return r.label_rank if r.label_rank is not None and r.label_rank <= k else None


def hit_rate(results: Sequence[RankingResult], k: int = 20) -> float:
    return sum(_hit_rank(r, k) is not None for r in results) / len(results)


def ndcg(results: Sequence[RankingResult], k: int = 20) -> float:
    total = 0.0
    for r in results:
        rank = _hit_rank(r, k)
        if rank is not None:
            total += 1.0 / math.log2(rank + 1)
    return total / len(results)


def ild(ranked: Sequence[int], topic: Mapping[int, int] | Callable[[int], int],
        k: int | None = None) -> float | None:
    """Mean topical distance over ordered pairs of distinct list positions."""
    items = list(ranked)[:k] if k else list(ranked)
    if len(items) < 2:
        return None
    get = topic if callable(topic) else topic.__getitem__
    topics = [get(a) for a in items]
    n = len(topics)
    counts: dict[int, int] = {}
    for t in topics:
        counts[t] = counts.get(t, 0) + 1
    same = sum(c * (c - 1) for c in counts.values())
    return (n * (n - 1) - same) / (n * (n - 1))


def unexp(ranked: Sequence[int], prefix: Sequence[int],
          topic: Mapping[int, int] | Callable[[int], int], k: int | None = None) -> float:
    """Mean over recommended items of the mean topical distance to the prefix."""
    items = list(ranked)[:k] if k else list(ranked)
    if not prefix:
        raise ValueError("unexp needs a non-empty session prefix")
    if not items:
        return 0.0
    get = topic if callable(topic) else topic.__getitem__
    ptopics = [get(b) for b in prefix]
    total = 0.0
    for a in items:
        ta = get(a)
        total += sum(ta != tb for tb in ptopics) / len(ptopics)
    return total / len(items)


def coverage(results: Sequence[RankingResult], k: int = 20) -> float:
    """Distinct recommended articles over distinct labels (not clamped to 1)."""
    shown = {a for r in results for a in r.ranked[:k]}
    labels = {r.label for r in results}
    return len(shown) / len(labels)


def report(results: Sequence[RankingResult], topic, k: int = 20) -> dict | None:
    """All metrics for one result set; ``None`` for an empty set."""
    if not results:
        return None
    ilds = [v for v in (ild(r.ranked, topic, k) for r in results) if v is not None]
    unexps = [unexp(r.ranked, r.prefix, topic, k) for r in results if r.prefix]
    return {
        "n": len(results),
        f"HR@{k}": hit_rate(results, k),
        f"NDCG@{k}": ndcg(results, k),
        f"ILD@{k}": float(np.mean(ilds)) if ilds else None,
        f"unEXP@{k}": float(np.mean(unexps)) if unexps else None,
        f"COV@{k}": coverage(results, k),
    }


def length_bucket(n: int) -> str:
    return str(n) if n < 5 else "5+"


def stratified_report(results: Sequence[RankingResult], train_articles: Iterable[int] | None,
                      topic, k: int = 20) -> dict:
    """Overall metrics plus cold/non-cold and prefix-length strata.

    When ``train_articles`` is given the cold flag is recomputed as "label never
    clicked in training".  Empty strata are absent from the output.
    """
    if train_articles is not None:
        seen = set(train_articles)
        for r in results:
            r.cold = r.label not in seen
    out = {"overall": report(results, topic, k), "cold": {}, "length": {}}
    for name, flag in (("cold", True), ("non_cold", False)):
        part = [r for r in results if r.cold == flag]
        if part:
            out["cold"][name] = report(part, topic, k)
    for b in LENGTH_BUCKETS:
        part = [r for r in results if length_bucket(r.prefix_len) == b]
        if part:
            out["length"][b] = report(part, topic, k)
    total = len(results)
    out["cold_fraction"] = sum(r.cold for r in results) / total if total else None
    return out


def average_reports(reports: Sequence[dict]) -> dict:
    """Fold average: uniform mean and size-weighted mean of every metric."""
    keys = [k for k in reports[0] if k != "n"]
    sizes = np.array([r["n"] for r in reports], dtype=float)
    out = {"folds": len(reports), "n": int(sizes.sum()), "uniform": {}, "weighted": {}}
    for key in keys:
        vals = [r[key] for r in reports]
        if any(v is None for v in vals):
            continue
        out["uniform"][key] = float(np.mean(vals))
        out["weighted"][key] = float(np.average(vals, weights=sizes))
    return out


def format_table(metrics: dict, title: str = "") -> str:
    """Aligned human-readable table for a flat metric dict."""
    rows = [(k, "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
            for k, v in metrics.items() if not isinstance(v, dict)]
    width = max((len(k) for k, _ in rows), default=0)
    lines = [title] if title else []
    lines += [f"{k:<{width}}  {v:>10}" for k, v in rows]
    return "\n".join(lines)


def dump_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
