"""Batching, negative sampling per epoch, training loop and ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from newsrec import tensor as T
from newsrec.errors import NumericError
from newsrec.ingest import Catalog, TrainingInstance
from newsrec.metrics import RankingResult, hit_rate
from newsrec.model import Batch, ModelConfig, NewsRecModel
from newsrec.negsample import PublishIndex, reconstruct_impressions
from newsrec.seeding import derive_rng
from newsrec.temporal import duration_bucket, start_rows

log = logging.getLogger(__name__)


@dataclass
class InstanceTable:
    """Column view of a list of instances, in catalog-index space."""

    instances: list[TrainingInstance]
    prefixes: list[np.ndarray]
    durations: list[np.ndarray]
    click_ts: list[np.ndarray]
    start_ts: np.ndarray
    request_ts: np.ndarray
    label: np.ndarray
    session_clicks: list[np.ndarray]
    session_keys: list[str]

    @classmethod
    def build(cls, instances: Sequence[TrainingInstance], catalog: Catalog, m: int,
              max_prefix: int = 50) -> "InstanceTable":
        prefixes, durations, click_ts, clicks_of = [], [], [], {}
        for inst in instances:
            pre = inst.prefix[-max_prefix:]
            prefixes.append(catalog.indices(c.article_id for c in pre))
            durations.append(np.array([duration_bucket(c.active_time, m) for c in pre],
                                      dtype=np.int64))
            click_ts.append(np.array([c.click_timestamp for c in pre], dtype=np.int64))
            key = inst.session.key
            if key not in clicks_of:
                clicks_of[key] = catalog.indices(inst.session.article_ids)
        return cls(
            instances=list(instances),
            prefixes=prefixes,
            durations=durations,
            click_ts=click_ts,
            start_ts=np.array([i.session.start_timestamp for i in instances], dtype=np.int64),
            request_ts=np.array([i.request_timestamp for i in instances], dtype=np.int64),
            label=np.array([catalog.index_of(i.label.article_id) for i in instances],
                           dtype=np.int64),
            session_clicks=[clicks_of[i.session.key] for i in instances],
            session_keys=[i.session.key for i in instances],
        )

    def __len__(self) -> int:
        return len(self.instances)


class CandidatePool:
    """Which articles may be ranked for a request at time t.

    An article is a candidate once it is published (publish time <= t); when
    ``allowed`` is given it further restricts the catalog (e.g. to articles
    known at training time).
    """

    def __init__(self, publish_ts: np.ndarray, allowed: np.ndarray | None = None):
        self.publish_ts = publish_ts
        self.allowed = allowed

    def mask(self, request_ts: np.ndarray) -> np.ndarray:
        m = self.publish_ts[None, :] <= request_ts[:, None]
        if self.allowed is not None:
            m &= self.allowed[None, :]
        return m


def make_batch(table: InstanceTable, rows: np.ndarray, pool: CandidatePool, config: ModelConfig,
               *, force_label: bool = False, negatives: np.ndarray | None = None,
               neg_mask: np.ndarray | None = None) -> Batch:
    B = len(rows)
    lengths = [len(table.prefixes[r]) for r in rows]
    width = max(lengths)
    items = np.zeros((B, width), dtype=np.int64)
    mask = np.zeros((B, width), dtype=bool)
    durations = np.full((B, width), config.m, dtype=np.int64)
    click_ts = np.zeros((B, width), dtype=np.int64)
    for b, r in enumerate(rows):
        n = lengths[b]
        items[b, :n] = table.prefixes[r]
        mask[b, :n] = True
        durations[b, :n] = table.durations[r]
        click_ts[b, :n] = table.click_ts[r]
        click_ts[b, n:] = table.click_ts[r][-1]
    if config.per_click_start:
        start = start_rows(click_ts)
    else:
        start = start_rows(table.start_ts[rows])
    label = table.label[rows]
    pool_mask = pool.mask(table.request_ts[rows])
    if force_label:
        pool_mask[np.arange(B), label] = True
    return Batch(items, mask, durations, start, label, pool_mask, negatives, neg_mask,
                 extra={"rows": rows})


class NegativeSampler:
    """Draws |Ne| negatives per instance, fresh every epoch.

    Window strategy: unclicked explicit impressions when the session has
    them, otherwise the publish-order neighbourhood of the session's clicks.
    Both strategies only draw from the instance's candidate pool and never
    return an article the session clicked.
    """

    def __init__(self, table: InstanceTable, catalog: Catalog, pool: CandidatePool,
                 config: ModelConfig):
        self.table = table
        self.catalog = catalog
        self.config = config
        self.size = config.n_negatives
        self.strategy = config.neg_strategy
        self.by_time = np.argsort(pool.publish_ts, kind="stable")
        self.sorted_ts = pool.publish_ts[self.by_time]
        self.allowed = pool.allowed
        self._session_pools: dict[str, np.ndarray] = {}
        if self.strategy == "window":
            index = PublishIndex.from_catalog(catalog)
            for inst, clicks in zip(table.instances, table.session_clicks):
                key = inst.session.key
                if key in self._session_pools:
                    continue
                if inst.session.impressions:
                    imp = [catalog.index_of(a) for a, c in inst.session.impressions.items()
                           if not c and a in catalog]
                    cand = np.setdiff1d(np.array(imp, dtype=np.int64), clicks)
                else:
                    cand = reconstruct_impressions(clicks, index, config.window)
                self._session_pools[key] = cand

    def _candidates(self, r: int) -> np.ndarray:
        n = np.searchsorted(self.sorted_ts, self.table.request_ts[r], side="right")
        cand = self.by_time[:n]
        if self.allowed is not None:
            cand = cand[self.allowed[cand]]
        return cand

    def _draw_excluding(self, cand: np.ndarray, k: int, banned: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
        take = min(len(cand), k + len(banned))
        picked = cand[rng.choice(len(cand), size=take, replace=False)]
        picked = picked[~np.isin(picked, banned)]
        return picked[:k]

    def sample(self, rows: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        K = self.size
        out = np.zeros((len(rows), K), dtype=np.int64)
        mask = np.zeros((len(rows), K), dtype=bool)
        for b, r in enumerate(rows):
            clicks = self.table.session_clicks[r]
            banned = np.union1d(clicks, [self.table.label[r]])
            chosen = np.empty(0, dtype=np.int64)
            if self.strategy == "window":
                pool = self._session_pools[self.table.session_keys[r]]
                ts = self.catalog.publish_ts[pool]
                pool = pool[ts <= self.table.request_ts[r]]
                if self.allowed is not None:
                    pool = pool[self.allowed[pool]]
                pool = pool[~np.isin(pool, banned)]
                if len(pool) >= K:
                    chosen = rng.choice(pool, size=K, replace=False)
                else:
                    chosen = pool
            if len(chosen) < K:
                extra = self._draw_excluding(self._candidates(r), K - len(chosen),
                                             np.union1d(banned, chosen), rng)
                chosen = np.concatenate([chosen, extra])
            out[b, :len(chosen)] = chosen
            mask[b, :len(chosen)] = True
        return out, mask


# ------------------------------------------------------------------- ranking


ScoreFn = Callable[[Batch], np.ndarray]


def rank_instances(score_fn: ScoreFn, table: InstanceTable, pool: CandidatePool,
                   catalog: Catalog, config: ModelConfig, k: int = 20,
                   train_articles: set[int] | None = None,
                   batch_size: int = 1024) -> list[RankingResult]:
    """Rank the candidate pool for every instance; prefix articles are excluded."""
    results = []
    for start in range(0, len(table), batch_size):
        rows = np.arange(start, min(start + batch_size, len(table)))
        batch = make_batch(table, rows, pool, config)
        scores = np.array(score_fn(batch), dtype=np.float64, copy=True)
        valid = batch.pool.copy()
        for b in range(len(rows)):
            valid[b, batch.items[b, batch.mask[b]]] = False
        scores[~valid] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for b, r in enumerate(rows):
            lab = int(table.label[r])
            top = [int(i) for i in order[b] if valid[b, i]]
            if valid[b, lab]:
                s = scores[b, lab]
                row = scores[b]
                rank = 1 + int(np.sum(row > s)) + int(np.sum(row[:lab] == s))
            else:
                rank = None
            label_id = int(catalog.ids[lab])
            results.append(RankingResult(
                session_key=table.session_keys[r],
                ranked=[int(catalog.ids[i]) for i in top],
                label=label_id,
                label_rank=rank,
                prefix=[int(catalog.ids[i]) for i in table.prefixes[r]],
                cold=(train_articles is not None and label_id not in train_articles),
            ))
    return results


def popularity_scores(train_table: InstanceTable, n_articles: int) -> np.ndarray:
    """Training click counts per catalog index (prefix clicks plus labels)."""
    counts = np.zeros(n_articles)
    seen_sessions = set()
    for inst, clicks in zip(train_table.instances, train_table.session_clicks):
        # count each session's clicks once, not once per mini-session
        if inst.session.key in seen_sessions:
            continue
        seen_sessions.add(inst.session.key)
        np.add.at(counts, clicks, 1.0)
    return counts


def popularity_scorer(counts: np.ndarray) -> ScoreFn:
    return lambda batch: np.broadcast_to(counts, batch.pool.shape)


# ------------------------------------------------------------------ training


def epoch_batches(table: InstanceTable, pool: CandidatePool, config: ModelConfig, epoch: int,
                  sampler: NegativeSampler | None = None):
    """Shuffled training batches for one epoch, label forced into the pool."""
    order = derive_rng(config.seed, "shuffle", epoch).permutation(len(table))
    neg_rng = derive_rng(config.seed, "negatives", epoch)
    for start in range(0, len(order), config.batch_size):
        rows = order[start:start + config.batch_size]
        negs = masks = None
        if sampler is not None:
            negs, masks = sampler.sample(rows, neg_rng)
        yield make_batch(table, rows, pool, config, force_label=True,
                         negatives=negs, neg_mask=masks)


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_hr: float = 0.0
    losses: list[float] = field(default_factory=list)


def train_model(model: NewsRecModel, train_table: InstanceTable, valid_table: InstanceTable | None,
                catalog: Catalog, pool: CandidatePool, *, max_epochs: int | None = None,
                max_batches: int | None = None, valid_k: int = 20,
                log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation HR@k.

    ``max_batches`` caps the total number of optimizer steps (used by
    equivalence checks); without validation data the last epoch wins.
    """
    c = model.config
    opt = T.Adam(model.parameters(), lr=c.lr)
    sampler = NegativeSampler(train_table, catalog, pool, c) if c.negatives_active else None
    epochs = c.max_epochs if max_epochs is None else max_epochs
    result = TrainResult(best_state={k: v.copy() for k, v in model.state_dict().items()})
    best, stale, steps = -1.0, 0, 0
    for epoch in range(epochs):
        total, n_batches = 0.0, 0
        for batch in epoch_batches(train_table, pool, c, epoch, sampler):
            rows = batch.extra["rows"]
            with T.Tape() as tape:
                loss = model.loss(batch)
            value = float(loss.data)
            if not np.isfinite(value):
                keys = [train_table.session_keys[r] for r in rows[:20]]
                raise NumericError(f"non-finite loss at epoch {epoch}; batch sessions {keys}")
            T.backward(tape, loss)
            opt.step()
            result.losses.append(value)
            total += value
            n_batches += 1
            steps += 1
            if max_batches is not None and steps >= max_batches:
                break
        entry = {"epoch": epoch, "loss": total / max(n_batches, 1)}
        if valid_table is not None and len(valid_table):
            res = rank_instances(model.scores, valid_table, pool, catalog, c, k=valid_k)
            entry[f"valid_HR@{valid_k}"] = hit_rate(res, valid_k)
            score = entry[f"valid_HR@{valid_k}"]
        else:
            score = float(epoch)
        result.history.append(entry)
        if log_fn:
            log_fn(entry)
        log.info("epoch %d %s", epoch, entry)
        if score > best:
            best, stale = score, 0
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            result.best_epoch = epoch
            result.best_valid_hr = score
        else:
            stale += 1
            if stale >= c.patience:
                break
        if max_batches is not None and steps >= max_batches:
            break
    return result
