"""Negative feedback: approximate impression lists from publish-time order.

Articles are laid out by publish time; everything within ``window // 2``
positions of a clicked article on either side is treated as probably seen.
Unclicked members of that neighbourhood are the candidate negatives.
"""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

from newsrec.errors import DataError
from newsrec.ingest import Catalog, Session


class PublishIndex:
    """Catalog indices sorted by (publish time, article id)."""

    def __init__(self, publish_ts: np.ndarray, article_ids: np.ndarray | None = None):
        publish_ts = np.asarray(publish_ts)
        ids = np.arange(len(publish_ts)) if article_ids is None else np.asarray(article_ids)
        self.order = np.lexsort((ids, publish_ts))
        self.position = np.empty_like(self.order)
        self.position[self.order] = np.arange(len(self.order))

    @classmethod
    def from_catalog(cls, catalog: Catalog) -> "PublishIndex":
        return cls(catalog.publish_ts, catalog.ids)

    def __len__(self) -> int:
        return len(self.order)


def reconstruct_impressions(clicked: Sequence[int], index: PublishIndex, window: int = 300,
                            exclude: Iterable[int] = ()) -> np.ndarray:
    """Union of the publish-order neighbourhoods of ``clicked`` (catalog indices).

    Clicked articles and anything in ``exclude`` are removed.  Returns sorted
    catalog indices.
    """
    if window <= 0:
        raise DataError(f"window must be positive, got {window}")
    half = window // 2
    n = len(index)
    pos = index.position[np.asarray(clicked, dtype=np.int64)]
    spans = [index.order[max(p - half, 0):min(p + half + 1, n)] for p in pos]
    pool = np.unique(np.concatenate(spans)) if spans else np.empty(0, dtype=np.int64)
    drop = np.concatenate([np.asarray(clicked, dtype=np.int64),
                           np.asarray(list(exclude), dtype=np.int64)])
    return np.setdiff1d(pool, drop, assume_unique=False)


def sample_negatives(pool: np.ndarray, size: int, rng: np.random.Generator | int,
                     fallback: np.ndarray | None = None,
                     exclude: Iterable[int] = ()) -> np.ndarray:
    """Uniform draw of ``size`` items from ``pool`` without replacement.

    A pool smaller than ``size`` is taken whole and topped up uniformly from
    ``fallback`` (minus ``exclude`` and the pool itself).
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    pool = np.asarray(pool, dtype=np.int64)
    if len(pool) >= size:
        return rng.choice(pool, size=size, replace=False)
    if fallback is None:
        if len(pool) == 0:
            raise DataError("empty negative pool and no fallback")
        return pool.copy()
    rest = np.setdiff1d(np.asarray(fallback, dtype=np.int64),
                        np.concatenate([pool, np.asarray(list(exclude), dtype=np.int64)]))
    need = size - len(pool)
    if len(rest) == 0 and len(pool) == 0:
        raise DataError("no article left to sample negatives from")
    extra = rng.choice(rest, size=min(need, len(rest)), replace=False)
    return np.concatenate([pool, extra])


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def jaccard_eval(negatives: dict[str, Iterable[int]], impressions: dict[str, Iterable[int]]) -> float:
    """Mean Jaccard similarity over sessions that have ground-truth impressions."""
    keys = [k for k in negatives if k in impressions]
    if not keys:
        raise DataError("no session has both negatives and impressions")
    return float(np.mean([jaccard(negatives[k], impressions[k]) for k in keys]))


def compare_strategies(sessions: Sequence[Session], catalog: Catalog, size: int = 100,
                       window: int = 300, seed: int = 0) -> dict[str, float]:
    """Mean Jaccard of window vs random negatives against true unclicked impressions."""
    from newsrec.seeding import derive_rng

    index = PublishIndex.from_catalog(catalog)
    everything = np.arange(len(catalog))
    truth, win, rnd = {}, {}, {}
    rng_w = derive_rng(seed, "jaccard", "window")
    rng_r = derive_rng(seed, "jaccard", "random")
    for s in sessions:
        if not s.impressions:
            continue
        clicked = catalog.indices(s.article_ids)
        truth[s.key] = {catalog.index_of(a) for a, c in s.impressions.items()
                        if not c and a in catalog}
        pool = reconstruct_impressions(clicked, index, window)
        win[s.key] = sample_negatives(pool, size, rng_w, fallback=everything, exclude=clicked)
        rnd[s.key] = sample_negatives(np.empty(0, dtype=np.int64), size, rng_r,
                                      fallback=everything, exclude=clicked)
    return {"window": jaccard_eval(win, truth), "random": jaccard_eval(rnd, truth),
            "sessions": len(truth)}


def write_negatives(path, negatives: dict[str, Sequence[int]], catalog: Catalog) -> None:
    """Audit dump: session key followed by the original ids of its negatives."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for key in sorted(negatives):
            w.writerow([key] + [int(catalog.ids[i]) for i in negatives[key]])
