"""End-to-end fold runs: preprocess -> train -> rank -> report."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from newsrec.ingest import (Catalog, Fold, Session, augment_all, estimate_active_time,
                            split_folds)
from newsrec.metrics import stratified_report
from newsrec.model import ModelConfig, NewsRecModel
from newsrec.train import (CandidatePool, InstanceTable, TrainResult, popularity_scorer,
                           popularity_scores, rank_instances, train_model)

# ablation name -> config overrides; "random" swaps the negative sampler
ABLATIONS = {
    "full": {},
    "-neut": {"use_neutral": False},
    "-pos": {"use_positive": False},
    "-neg": {"use_negative": False},
    "random": {"neg_strategy": "random"},
    "-content": {"use_content": False},
}


def ablate(config: ModelConfig, name: str) -> ModelConfig:
    return replace(config, **ABLATIONS[name])


def prepare_sessions(sessions: Sequence[Session]) -> list[Session]:
    return [estimate_active_time(s) for s in sessions]


@dataclass
class FoldData:
    fold: Fold
    train: InstanceTable
    valid: InstanceTable
    test: InstanceTable
    train_pool: CandidatePool
    test_pool: CandidatePool
    train_articles: set[int]


def build_fold_data(fold: Fold, catalog: Catalog, config: ModelConfig) -> FoldData:
    known = catalog.publish_ts < fold.train_end
    tables = [InstanceTable.build(part, catalog, config.m, config.max_prefix)
              for part in (fold.train, fold.valid, fold.test)]
    train_articles = {c.article_id for inst in fold.train + fold.valid
                      for c in inst.session.clicks
                      if c.click_timestamp < fold.train_end}
    return FoldData(fold, *tables, train_pool=CandidatePool(catalog.publish_ts, known),
                    test_pool=CandidatePool(catalog.publish_ts), train_articles=train_articles)


def make_folds(sessions: Sequence[Session], train_days: int, test_days: int):
    return split_folds(augment_all(prepare_sessions(sessions)), train_days, test_days)


@dataclass
class FoldRun:
    model: NewsRecModel
    train_result: TrainResult
    report: dict
    results: list


def run_fold(data: FoldData, catalog: Catalog, config: ModelConfig, *,
             log_fn: Callable[[dict], None] | None = None) -> FoldRun:
    model = NewsRecModel(config, catalog.content, catalog.publish_ts)
    tr = train_model(model, data.train, data.valid, catalog, data.train_pool,
                     valid_k=config.k, log_fn=log_fn)
    model.load_state_dict(tr.best_state)
    results = rank_instances(model.scores, data.test, data.test_pool, catalog, config,
                             k=config.k, train_articles=data.train_articles)
    report = stratified_report(results, None, topic_lookup(catalog), config.k)
    return FoldRun(model, tr, report, results)


def run_popularity(data: FoldData, catalog: Catalog, config: ModelConfig) -> dict:
    train_all = InstanceTable.build(data.fold.train + data.fold.valid, catalog, config.m,
                                    config.max_prefix)
    counts = popularity_scores(train_all, len(catalog))
    results = rank_instances(popularity_scorer(counts), data.test, data.test_pool, catalog,
                             config, k=config.k, train_articles=data.train_articles)
    return stratified_report(results, None, topic_lookup(catalog), config.k)


def topic_lookup(catalog: Catalog) -> dict[int, int]:
    return {int(a): int(t) for a, t in zip(catalog.ids, catalog.topics)}


def hr(report: dict, k: int = 20, stratum: str | None = None) -> float:
    part = report["overall"] if stratum is None else report["cold"][stratum]
    return part[f"HR@{k}"]
