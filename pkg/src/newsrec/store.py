"""On-disk layout of a preprocessed dataset and of training runs.

A preprocessed directory holds:

    catalog.csv          the catalog, re-written in canonical form
    article_index.csv    original article id -> dense index
    sessions.jsonl       one session per line (clicks, optional impressions)
    folds.json           per fold: train/valid/test instance refs and train_end
    manifest.json        inputs, their hashes, fold settings and stats

Instance refs are ``[session_key, prefix_len]`` pairs, so folds are stored
without duplicating click data.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from newsrec.errors import DataError
from newsrec.ingest import (Catalog, ClickEvent, Fold, Session, TrainingInstance,
                            estimate_active_time, read_catalog)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None


def write_sessions(path, sessions) -> None:
    with open(path, "w") as fh:
        for s in sessions:
            rec = {"key": s.key,
                   "clicks": [[c.user_key, c.article_id, c.click_timestamp, c.active_time]
                              for c in s.clicks]}
            if s.impressions is not None:
                rec["impressions"] = [[a, s.impressions[a]] for a in sorted(s.impressions)]
            fh.write(json.dumps(rec) + "\n")


def read_sessions(path) -> list[Session]:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            clicks = [ClickEvent(u, a, t, at) for u, a, t, at in rec["clicks"]]
            imp = rec.get("impressions")
            out.append(Session(rec["key"], clicks,
                               None if imp is None else {int(a): bool(c) for a, c in imp}))
    return out


def instance_refs(instances) -> list[list]:
    return [[i.session.key, i.prefix_len] for i in instances]


def write_folds(path, folds: list[Fold]) -> None:
    dump_json(path, [{"train": instance_refs(f.train), "valid": instance_refs(f.valid),
                      "test": instance_refs(f.test), "train_end": f.train_end} for f in folds])


class Dataset:
    """A loaded preprocessed directory.  Active times are estimated on load."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "manifest.json").exists():
            raise DataError(f"{self.root}: not a preprocessed data directory "
                            "(run `newsrec preprocess` first)")
        self.manifest = load_json(self.root / "manifest.json")
        self.catalog: Catalog = read_catalog(self.root / "catalog.csv")
        self.sessions = {s.key: estimate_active_time(s)
                         for s in read_sessions(self.root / "sessions.jsonl")}
        self._folds = load_json(self.root / "folds.json")

    @property
    def n_folds(self) -> int:
        return len(self._folds)

    def hash(self) -> str:
        return file_hash(self.root / "manifest.json")

    def fold(self, fold_id: int) -> Fold:
        if not 0 <= fold_id < len(self._folds):
            raise DataError(f"fold {fold_id} does not exist; dataset has {len(self._folds)}")
        rec = self._folds[fold_id]

        def build(refs):
            return [TrainingInstance(self.sessions[k], n) for k, n in refs]

        return Fold(build(rec["train"]), build(rec["valid"]), build(rec["test"]),
                    int(rec["train_end"]))
