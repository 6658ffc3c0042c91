"""Command-line entry point.

    newsrec generate-synthetic --out data/raw
    newsrec preprocess --clicks data/raw/clicks.csv --catalog data/raw/catalog.csv --out data/pre
    newsrec train --data data/pre --fold 0 --out runs/full
    newsrec evaluate --run runs/full --k 5 10 20
    newsrec sweep --data data/pre --grid lam=0,0.5,1 --out runs/sweep
    newsrec export-time-embeddings --checkpoint runs/full/checkpoint.bin --out time.csv

Settings come from an optional JSON config file (``--config``) and are
overridden by flags.  Exit codes: 0 ok, 1 usage/config error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from newsrec.checkpoint import config_hash, load_checkpoint, save_checkpoint
from newsrec.errors import ConfigError, DataError, NewsRecError
from newsrec.experiment import ABLATIONS, ablate, build_fold_data, topic_lookup
from newsrec.ingest import (IngestReport, attach_impressions, augment_all, dataset_stats,
                            estimate_active_time, read_catalog, read_clicks, read_impressions,
                            sessionize, split_folds, write_catalog, write_clicks,
                            write_impressions)
from newsrec.metrics import (LENGTH_BUCKETS, average_reports, format_table, stratified_report)
from newsrec.model import ModelConfig, NewsRecModel
from newsrec.store import Dataset, dump_json, file_hash, load_json, write_folds, write_sessions
from newsrec.synthetic import SyntheticConfig, generate_synthetic
from newsrec.temporal import TimeEmbeddings, export_time_embeddings
from newsrec.train import (InstanceTable, popularity_scorer, popularity_scores, rank_instances,
                           train_model)

log = logging.getLogger("newsrec")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# "no-neut" etc. spare users from quoting names that start with a dash
ABLATION_ALIASES = {**{k: k for k in ABLATIONS},
                    **{"no" + k: k for k in ABLATIONS if k.startswith("-")}}

MODEL_FLAGS = {"lam": float, "n_negatives": int, "d_n": int, "d_c": int, "d_t": int, "lr": float,
               "batch_size": int, "max_epochs": int, "patience": int, "window": int}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in MODEL_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--strategy", dest="neg_strategy", choices=["window", "random"], default=None)
    p.add_argument("--ablation", choices=sorted(ABLATION_ALIASES), default=None,
                   help="switch off one feedback type (or swap the sampler)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any model setting, e.g. --set share_time_tables=false")


def _model_config(args, cfg: dict, d_c: int) -> ModelConfig:
    model = dict(cfg.get("model", {}))
    for name in list(MODEL_FLAGS) + ["neg_strategy"]:
        value = getattr(args, name, None)
        if value is not None:
            model[name] = value
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        model[key] = _parse_value(value)
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed")
    if seed is not None:
        model["seed"] = int(seed)
    if "d_c" in model and model["d_c"] != d_c:
        raise ConfigError(f"d_c={model['d_c']} but the catalog has {d_c}-dimensional content")
    model["d_c"] = d_c
    try:
        config = ModelConfig.from_dict(model)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    ablation = getattr(args, "ablation", None) or cfg.get("ablation")
    if ablation:
        if ablation not in ABLATION_ALIASES:
            raise ConfigError(f"unknown ablation {ablation!r}")
        config = ablate(config, ABLATION_ALIASES[ablation])
    return config


def _k_list(args, cfg: dict) -> list[int]:
    ks = args.k or cfg.get("k") or [20]
    ks = sorted({int(k) for k in ks})
    if ks[0] <= 0:
        raise ConfigError("k must be positive")
    return ks


def _staging(out: Path) -> Path:
    """Temporary sibling directory; renamed into place once everything is written."""
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _commit(stage: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)


# ---------------------------------------------------------------- commands


def cmd_generate_synthetic(args, cfg: dict) -> int:
    syn = dict(cfg.get("synthetic", {}))
    for item in args.overrides:
        key, _, value = item.partition("=")
        syn[key] = _parse_value(value)
    if args.seed is not None:
        syn["seed"] = args.seed
    if args.n_sessions is not None:
        syn["n_sessions"] = args.n_sessions
    try:
        config = SyntheticConfig(**syn)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    corpus = generate_synthetic(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_clicks(out / "clicks.csv", corpus.events)
    write_catalog(out / "catalog.csv", corpus.catalog)
    write_impressions(out / "impressions.jsonl", corpus.impressions)
    dump_json(out / "generator.json", {"config": config.to_dict(),
                                       "hour_topics": corpus.hour_topics.tolist()})
    print(f"wrote {len(corpus.events)} clicks, {len(corpus.catalog)} articles, "
          f"{len(corpus.sessions)} sessions to {out}")
    return 0


def cmd_preprocess(args, cfg: dict) -> int:
    folds_cfg = cfg.get("folds", {})
    train_days = args.train_days or folds_cfg.get("train_days", 3)
    test_days = args.test_days or folds_cfg.get("test_days", 1)
    for p in filter(None, [args.clicks, args.catalog, args.impressions]):
        if not Path(p).exists():
            raise DataError(f"{p}: no such file")
    report = IngestReport()
    catalog = read_catalog(args.catalog)
    events = read_clicks(args.clicks, report)
    if not events:
        raise DataError(f"{args.clicks}: no parseable clicks"
                        + (f" (bad lines: {report.unparseable[:20]})" if report.unparseable else ""))
    sessions = sessionize(events, catalog, min_timestamp=args.min_timestamp,
                          max_timestamp=args.max_timestamp, report=report)
    if not sessions:
        raise DataError("no session with at least two clicks")
    n_imp = 0
    if args.impressions:
        n_imp = attach_impressions(sessions, read_impressions(args.impressions))
    estimated = [estimate_active_time(s) for s in sessions]
    split = split_folds(augment_all(estimated), train_days, test_days)

    out = Path(args.out)
    stage = _staging(out)
    try:
        write_catalog(stage / "catalog.csv", catalog)
        catalog.write_mapping(stage / "article_index.csv")
        write_sessions(stage / "sessions.jsonl", sessions)
        write_folds(stage / "folds.json", split.folds)
        stats = dataset_stats(sessions, catalog)
        manifest = {
            "inputs": {name: {"path": os.path.abspath(p), "sha256": file_hash(p)}
                       for name, p in (("clicks", args.clicks), ("catalog", args.catalog),
                                       ("impressions", args.impressions)) if p},
            "folds": {"train_days": train_days, "test_days": test_days,
                      "count": len(split.folds),
                      "sizes": [{"train": len(f.train), "valid": len(f.valid),
                                 "test": len(f.test)} for f in split.folds]},
            "stats": stats,
            "sessions_with_impressions": n_imp,
            "ingest": report.summary(),
            "outputs": {name: file_hash(stage / name) for name in
                        ("catalog.csv", "article_index.csv", "sessions.jsonl", "folds.json")},
        }
        dump_json(stage / "manifest.json", manifest)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    _commit(stage, out)
    print(format_table({**stats, "folds": len(split.folds)}, "dataset"))
    if report.unparseable:
        print(f"skipped {len(report.unparseable)} unparseable rows, lines "
              f"{report.unparseable[:20]}", file=sys.stderr)
    return 0


def _train_one(data: Dataset, fold_id: int, config: ModelConfig, out: Path,
               data_dir: str) -> dict:
    fold = data.fold(fold_id)
    fd = build_fold_data(fold, data.catalog, config)
    if not len(fd.train):
        raise DataError(f"fold {fold_id} has no training instances")
    model = NewsRecModel(config, data.catalog.content, data.catalog.publish_ts)
    history_path = out / "train_log.jsonl"
    with open(history_path, "w") as fh:
        def log_fn(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %(epoch)d loss %(loss).5f", entry)
        result = train_model(model, fd.train, fd.valid, data.catalog, fd.train_pool,
                             valid_k=config.k, log_fn=log_fn)
    model.load_state_dict(result.best_state)
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), config=config.to_dict(),
                    seed=config.seed, extra={"fold": fold_id, "best_epoch": result.best_epoch})
    manifest = {
        "command": "train",
        "data_dir": os.path.abspath(data_dir),
        "data_sha256": data.hash(),
        "fold": fold_id,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_sha256": config_hash(config.to_dict()),
        "history": result.history,
        "best_epoch": result.best_epoch,
        f"best_valid_HR@{config.k}": result.best_valid_hr,
        "checkpoint_sha256": file_hash(out / "checkpoint.bin"),
    }
    dump_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(args, cfg: dict) -> int:
    if args.manifest:
        old = load_json(args.manifest)
        data_dir = args.data or old["data_dir"]
        data = Dataset(data_dir)
        if data.hash() != old["data_sha256"]:
            raise DataError(f"{data_dir} does not match the manifest's data hash")
        config = ModelConfig.from_dict(old["config"])
        fold_id = old["fold"]
    else:
        if not args.data:
            raise ConfigError("train needs --data (or --manifest)")
        data_dir = args.data
        data = Dataset(data_dir)
        config = _model_config(args, cfg, data.catalog.d_c)
        fold_id = args.fold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _train_one(data, fold_id, config, out, data_dir)
    print(f"fold {fold_id}: best epoch {manifest['best_epoch']}, "
          f"valid HR@{config.k} {manifest[f'best_valid_HR@{config.k}']:.4f} -> {out}")
    return 0


def _evaluate_run(data: Dataset, fold_id: int, config: ModelConfig, state, ks: list[int],
                  popularity: bool = False) -> dict:
    fold = data.fold(fold_id)
    fd = build_fold_data(fold, data.catalog, config)
    kmax = max(ks)
    if popularity:
        table = InstanceTable.build(fold.train + fold.valid, data.catalog, config.m,
                                    config.max_prefix)
        score_fn = popularity_scorer(popularity_scores(table, len(data.catalog)))
    else:
        model = NewsRecModel(config, data.catalog.content, data.catalog.publish_ts)
        model.load_state_dict(state)
        score_fn = model.scores
    results = rank_instances(score_fn, fd.test, fd.test_pool, data.catalog, config, k=kmax,
                             train_articles=fd.train_articles)
    if not results:
        raise DataError(f"fold {fold_id} has an empty test set")
    topic = topic_lookup(data.catalog)
    return {str(k): stratified_report(results, None, topic, k) for k in ks}


def _write_report(out: Path, reports: dict, ks: list[int], meta: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"meta": meta, "reports": reports}
    if len(reports) > 1:
        payload["average"] = {
            str(k): average_reports([r[str(k)]["overall"] for r in reports.values()])
            for k in ks}
    dump_json(out / "report.json", payload)
    lines = []
    for name, rep in reports.items():
        for k in ks:
            lines.append(format_table(rep[str(k)]["overall"], f"[{name}] k={k}"))
            lines.append("")
    for k, avg in payload.get("average", {}).items():
        lines.append(format_table(avg["uniform"], f"[fold average, uniform] k={k}"))
        lines.append("")
    (out / "report.txt").write_text("\n".join(lines))
    # plot data: accuracy by prefix length (one series per k and per run)
    with open(out / "plot_length.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "k", "prefix_length", "n", "HR", "NDCG"])
        for name, rep in reports.items():
            for k in ks:
                for b in LENGTH_BUCKETS:
                    part = rep[str(k)]["length"].get(b)
                    if part:
                        w.writerow([name, k, b, part["n"], repr(part[f"HR@{k}"]),
                                    repr(part[f"NDCG@{k}"])])


def cmd_evaluate(args, cfg: dict) -> int:
    ks = _k_list(args, cfg)
    reports, meta = {}, {"k": ks, "runs": []}
    if args.popularity:
        if not args.data:
            raise ConfigError("--popularity needs --data")
        data = Dataset(args.data)
        folds = range(data.n_folds) if args.fold is None else [args.fold]
        config = ModelConfig(d_c=data.catalog.d_c)
        for f in folds:
            reports[f"popularity/fold{f}"] = _evaluate_run(data, f, config, None, ks, True)
            meta["runs"].append({"model": "popularity", "fold": f, "data_sha256": data.hash()})
    else:
        if not args.run:
            raise ConfigError("evaluate needs --run (or --popularity)")
        for i, run in enumerate(args.run):
            run = Path(run)
            manifest = load_json(run / "manifest.json")
            state, header = load_checkpoint(run / "checkpoint.bin")
            config = ModelConfig.from_dict(header["config"])
            if args.config or args.overrides:
                wanted = _model_config(args, cfg, config.d_c)
                if config_hash(wanted.architecture()) != config_hash(config.architecture()):
                    raise ConfigError(f"{run}: checkpoint architecture {config.architecture()} "
                                      f"does not match config {wanted.architecture()}")
            if file_hash(run / "checkpoint.bin") != manifest["checkpoint_sha256"]:
                raise DataError(f"{run}: checkpoint does not match its manifest")
            data = Dataset(args.data or manifest["data_dir"])
            if data.hash() != manifest["data_sha256"]:
                raise DataError(f"{run}: data directory does not match the manifest")
            fold_id = manifest["fold"] if args.fold is None else args.fold
            # keyed by position, not directory name, so reruns elsewhere give identical bytes
            reports[f"run{i}/fold{fold_id}"] = _evaluate_run(data, fold_id, config, state, ks)
            meta["runs"].append({"fold": fold_id,
                                 "checkpoint_sha256": manifest["checkpoint_sha256"]})
    out = Path(args.out) if args.out else Path(args.run[0]) if args.run else Path("report")
    _write_report(out, reports, ks, meta)
    print((out / "report.txt").read_text())
    return 0


def _parse_grid(items: list[str]) -> list[tuple[str, list]]:
    grid = []
    known = {f.name for f in fields(ModelConfig)}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        if key not in known:
            raise ConfigError(f"unknown grid key {key!r}")
        grid.append((key, [_parse_value(v) for v in values.split(",")]))
    return grid


def cmd_sweep(args, cfg: dict) -> int:
    ks = _k_list(args, cfg)
    grid = _parse_grid(args.grid or [f"{k}={','.join(map(str, v))}"
                                     for k, v in cfg.get("grid", {}).items()])
    if not grid:
        raise ConfigError("sweep needs at least one --grid KEY=V1,V2")
    data = Dataset(args.data)
    base = _model_config(args, cfg, data.catalog.d_c)
    folds = range(data.n_folds) if args.fold is None else [args.fold]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in grid]
    entries = []
    for n, values in enumerate(itertools.product(*[v for _, v in grid])):
        point = dict(zip(keys, values))
        try:
            config = replace(base, **point)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"grid point {point}: {e}") from None
        fold_reports = {}
        for f in folds:
            run_dir = out / f"point{n:03d}_fold{f}"
            run_dir.mkdir(exist_ok=True)
            manifest = _train_one(data, f, config, run_dir, args.data)
            state, _ = load_checkpoint(run_dir / "checkpoint.bin")
            fold_reports[f"fold{f}"] = _evaluate_run(data, f, config, state, ks)
            _write_report(run_dir, {f"fold{f}": fold_reports[f"fold{f}"]}, ks,
                          {"k": ks, "point": point})
        metrics = {str(k): average_reports([r[str(k)]["overall"] for r in fold_reports.values()])
                   for k in ks}
        entries.append({"point": point, "runs": [f"point{n:03d}_fold{f}" for f in folds],
                        "metrics": metrics})
        log.info("grid point %s: %s", point, metrics[str(ks[-1])]["uniform"])
    dump_json(out / "sweep.json", {"grid": dict(grid), "base_config": base.to_dict(),
                                   "entries": entries})
    with open(out / "plot_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["k", "HR", "NDCG"])
        for e in entries:
            for k in ks:
                u = e["metrics"][str(k)]["uniform"]
                w.writerow([e["point"][key] for key in keys]
                           + [k, repr(u[f"HR@{k}"]), repr(u[f"NDCG@{k}"])])
    for e in entries:
        k = ks[-1]
        print(f"{e['point']}: HR@{k} {e['metrics'][str(k)]['uniform'][f'HR@{k}']:.4f}")
    return 0


def cmd_export_time_embeddings(args, cfg: dict) -> int:
    state, header = load_checkpoint(args.checkpoint)
    config = ModelConfig.from_dict(header["config"])
    try:
        publish = state["time_table"]
        start = state.get("start_time_table", publish)
        duration = state["duration_table"]
    except KeyError as e:
        raise DataError(f"{args.checkpoint}: missing time table {e}") from None
    temb = TimeEmbeddings.create(config.d_t, config.m, np.random.default_rng(0),
                                 shared=config.share_time_tables)
    temb.publish_table.data = publish
    if not config.share_time_tables:
        temb.start_table.data = start
    temb.duration_table.data = duration
    n = export_time_embeddings(temb, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="newsrec", description="Session-based news recommendation with implicit "
                                            "positive, negative and neutral feedback.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("generate-synthetic", help="write a synthetic corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-sessions", type=int, default=None)
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    pp = sub.add_parser("preprocess", help="sessionize, augment and split into folds")
    common(pp)
    pp.add_argument("--clicks", required=True)
    pp.add_argument("--catalog", required=True)
    pp.add_argument("--impressions")
    pp.add_argument("--out", required=True)
    pp.add_argument("--train-days", type=int)
    pp.add_argument("--test-days", type=int)
    pp.add_argument("--min-timestamp", type=int)
    pp.add_argument("--max-timestamp", type=int)

    t = sub.add_parser("train", help="train one fold, keep the best-validation checkpoint")
    common(t)
    t.add_argument("--data")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="re-run exactly as recorded in a run manifest")
    _add_model_flags(t)

    e = sub.add_parser("evaluate", help="rank test sessions and write metric reports")
    common(e)
    e.add_argument("--run", nargs="+", help="run directories (several runs are averaged)")
    e.add_argument("--data", help="preprocessed data (defaults to the run's)")
    e.add_argument("--fold", type=int, default=None)
    e.add_argument("--k", type=int, nargs="+")
    e.add_argument("--popularity", action="store_true", help="evaluate the popularity baseline")
    e.add_argument("--out")
    e.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("sweep", help="train+evaluate over a parameter grid")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int, default=None, help="default: every fold")
    s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    s.add_argument("--k", type=int, nargs="+")
    s.add_argument("--out", required=True)
    _add_model_flags(s)

    x = sub.add_parser("export-time-embeddings", help="dump time tables for plotting")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    return p


COMMANDS = {
    "generate-synthetic": cmd_generate_synthetic,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-time-embeddings": cmd_export_time_embeddings,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(getattr(args, "config", None))
        return COMMANDS[args.command](args, cfg)
    except NewsRecError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
