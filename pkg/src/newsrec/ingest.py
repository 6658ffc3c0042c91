"""Click logs, article catalogs, sessions, mini-session instances and folds."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from newsrec.errors import DataError

log = logging.getLogger(__name__)

SESSION_GAP = 30 * 60
DAY = 86400


@dataclass(frozen=True)
class ClickEvent:
    user_key: str
    article_id: int
    click_timestamp: int
    active_time: float | None = None

    def __post_init__(self):
        if self.click_timestamp <= 0:
            raise DataError(f"click_timestamp must be positive, got {self.click_timestamp}")
        if self.active_time is not None and self.active_time <= 0:
            raise DataError(f"active_time must be positive, got {self.active_time}")


@dataclass(frozen=True)
class Article:
    article_id: int
    publish_timestamp: int
    topic_id: int
    content_vector: np.ndarray


class Catalog:
    """Articles re-indexed densely: internal index ``i`` <-> original ``ids[i]``."""

    def __init__(self, articles: Sequence[Article]):
        if not articles:
            raise DataError("catalog is empty")
        articles = sorted(articles, key=lambda a: a.article_id)
        d_c = len(articles[0].content_vector)
        for a in articles:
            if len(a.content_vector) != d_c:
                raise DataError(f"article {a.article_id}: content dimension "
                                f"{len(a.content_vector)} != {d_c}")
            if a.publish_timestamp <= 0:
                raise DataError(f"article {a.article_id}: non-positive publish timestamp")
        self.ids = np.array([a.article_id for a in articles], dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("duplicate article ids in catalog")
        self.publish_ts = np.array([a.publish_timestamp for a in articles], dtype=np.int64)
        self.topics = np.array([a.topic_id for a in articles], dtype=np.int64)
        self.content = np.array([a.content_vector for a in articles], dtype=np.float64)
        self._index = {int(a): i for i, a in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, article_id) -> bool:
        return int(article_id) in self._index

    @property
    def d_c(self) -> int:
        return self.content.shape[1]

    def index_of(self, article_id: int) -> int:
        return self._index[int(article_id)]

    def indices(self, article_ids: Iterable[int]) -> np.ndarray:
        return np.array([self._index[int(a)] for a in article_ids], dtype=np.int64)

    def write_mapping(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["article_id", "index"])
            for i, a in enumerate(self.ids):
                w.writerow([int(a), i])


@dataclass
class Session:
    key: str
    clicks: list[ClickEvent]
    impressions: dict[int, bool] | None = None  # article id -> clicked flag

    @property
    def start_timestamp(self) -> int:
        return self.clicks[0].click_timestamp

    @property
    def article_ids(self) -> list[int]:
        return [c.article_id for c in self.clicks]

    def __len__(self) -> int:
        return len(self.clicks)


@dataclass(frozen=True)
class TrainingInstance:
    session: Session
    prefix_len: int

    @property
    def prefix(self) -> list[ClickEvent]:
        return self.session.clicks[:self.prefix_len]

    @property
    def label(self) -> ClickEvent:
        return self.session.clicks[self.prefix_len]

    @property
    def timestamp(self) -> int:
        return self.label.click_timestamp

    @property
    def request_timestamp(self) -> int:
        """Time the recommendation is asked for: the last prefix click."""
        return self.session.clicks[self.prefix_len - 1].click_timestamp


@dataclass
class Fold:
    train: list[TrainingInstance]
    valid: list[TrainingInstance]
    test: list[TrainingInstance]
    train_end: int  # exclusive epoch-second bound of the training window


@dataclass
class FoldSplit:
    train_day_count: int
    test_day_count: int
    folds: list[Fold] = field(default_factory=list)


@dataclass
class IngestReport:
    unparseable: list[int] = field(default_factory=list)  # 1-based line numbers
    missing_article: int = 0
    out_of_window: int = 0

    def summary(self) -> dict:
        return {"unparseable_rows": len(self.unparseable),
                "unparseable_lines": self.unparseable[:20],
                "missing_article": self.missing_article,
                "out_of_window": self.out_of_window}


# ------------------------------------------------------------------- file I/O


def _parse_click(fields: dict) -> ClickEvent:
    at = fields.get("active_time")
    at = None if at in (None, "", "null") else float(at)
    return ClickEvent(str(fields["user_key"]), int(fields["article_id"]),
                      int(fields["click_timestamp"]), at)


def read_clicks(path, report: IngestReport | None = None) -> list[ClickEvent]:
    """Read a clicks file (.jsonl or delimited text with a header row)."""
    report = report if report is not None else IngestReport()
    path = Path(path)
    events = []
    with open(path, newline="") as fh:
        if path.suffix in (".jsonl", ".json"):
            rows = ((n, line) for n, line in enumerate(fh, 1) if line.strip())
            for n, line in rows:
                try:
                    events.append(_parse_click(json.loads(line)))
                except (ValueError, KeyError, TypeError, DataError):
                    report.unparseable.append(n)
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return events
            names = ["user_key", "article_id", "click_timestamp", "active_time"]
            for n, row in enumerate(reader, 2):
                try:
                    events.append(_parse_click(dict(zip(names, row))))
                except (ValueError, KeyError, TypeError, DataError):
                    report.unparseable.append(n)
    return events


def write_clicks(path, events: Iterable[ClickEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_key", "article_id", "click_timestamp", "active_time"])
        for e in events:
            w.writerow([e.user_key, e.article_id, e.click_timestamp,
                        "" if e.active_time is None else repr(float(e.active_time))])


def read_catalog(path) -> Catalog:
    """One article per line: article_id, publish_timestamp, topic_id, v1..v_dc."""
    articles = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for n, row in enumerate(reader, 1):
            if not row:
                continue
            try:
                aid, pts, topic = int(row[0]), int(row[1]), int(row[2])
                vec = np.array([float(x) for x in row[3:]])
            except (ValueError, IndexError):
                if n == 1:
                    continue  # header
                raise DataError(f"{path}:{n}: cannot parse catalog row") from None
            articles.append(Article(aid, pts, topic, vec))
    return Catalog(articles)


def write_catalog(path, catalog: Catalog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["article_id", "publish_timestamp", "topic_id"]
                   + [f"c{j}" for j in range(catalog.d_c)])
        for i in range(len(catalog)):
            w.writerow([int(catalog.ids[i]), int(catalog.publish_ts[i]), int(catalog.topics[i])]
                       + [repr(float(x)) for x in catalog.content[i]])


def read_impressions(path) -> dict[str, dict[int, bool]]:
    """JSONL rows ``{"session": key, "impressions": [[article_id, clicked], ...]}``."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["session"])] = {int(a): bool(c) for a, c in rec["impressions"]}
            except (ValueError, KeyError, TypeError):
                raise DataError(f"{path}:{n}: cannot parse impressions row") from None
    return out


def write_impressions(path, impressions: dict[str, dict[int, bool]]) -> None:
    with open(path, "w") as fh:
        for key in sorted(impressions):
            imp = impressions[key]
            rows = [[int(a), bool(imp[a])] for a in sorted(imp)]
            fh.write(json.dumps({"session": key, "impressions": rows}) + "\n")


# ------------------------------------------------------------------ sessions


def sessionize(events: Iterable[ClickEvent], catalog: Catalog | None = None, *,
               gap: int = SESSION_GAP, min_timestamp: int | None = None,
               max_timestamp: int | None = None,
               report: IngestReport | None = None) -> list[Session]:
    """Group clicks per user key and cut wherever two clicks are >= ``gap`` apart.

    Sessions with a single click are dropped.  Keys are ``"<user>#<k>"`` with
    ``k`` counting the kept sessions of that user, so re-sessionizing the
    flattened output reproduces it exactly.
    """
    report = report if report is not None else IngestReport()
    by_user: dict[str, list[ClickEvent]] = defaultdict(list)
    for e in events:
        if catalog is not None and e.article_id not in catalog:
            report.missing_article += 1
            continue
        if (min_timestamp is not None and e.click_timestamp < min_timestamp) or \
                (max_timestamp is not None and e.click_timestamp > max_timestamp):
            report.out_of_window += 1
            continue
        by_user[e.user_key].append(e)

    sessions = []
    for user in sorted(by_user):
        clicks = sorted(by_user[user], key=lambda e: e.click_timestamp)
        runs, current = [], [clicks[0]]
        for prev, cur in zip(clicks, clicks[1:]):
            if cur.click_timestamp - prev.click_timestamp >= gap:
                runs.append(current)
                current = []
            current.append(cur)
        runs.append(current)
        kept = [r for r in runs if len(r) >= 2]
        sessions.extend(Session(f"{user}#{k}", r) for k, r in enumerate(kept))
    sessions.sort(key=lambda s: (s.start_timestamp, s.key))
    return sessions


def flatten(sessions: Iterable[Session]) -> list[ClickEvent]:
    return [c for s in sessions for c in s.clicks]


def attach_impressions(sessions: Iterable[Session], impressions: dict[str, dict[int, bool]]) -> int:
    n = 0
    for s in sessions:
        if s.key in impressions:
            s.impressions = impressions[s.key]
            n += 1
    return n


def estimate_active_time(session: Session) -> Session:
    """Fill missing active times with the gap to the next click.

    The last click has no successor and keeps ``None`` (the unknown-duration
    category) unless the log gave an explicit value.
    """
    clicks = list(session.clicks)
    for i, c in enumerate(clicks):
        if c.active_time is None and i + 1 < len(clicks):
            gap = clicks[i + 1].click_timestamp - c.click_timestamp
            # equal timestamps give a zero gap; keep it unknown rather than invent one
            if gap > 0:
                clicks[i] = replace(c, active_time=float(gap))
    return replace(session, clicks=clicks)


def augment(session: Session) -> list[TrainingInstance]:
    """n clicks -> n-1 instances: prefix of the first k clicks predicts click k+1."""
    return [TrainingInstance(session, k) for k in range(1, len(session))]


def augment_all(sessions: Iterable[Session]) -> list[TrainingInstance]:
    return [inst for s in sessions for inst in augment(s)]


def _instance_order(inst: TrainingInstance):
    return (inst.timestamp, inst.session.key, inst.prefix_len)


def split_folds(instances: Sequence[TrainingInstance], train_days: int, test_days: int,
                valid_fraction: float = 0.1) -> FoldSplit:
    """Cut consecutive (train_days + test_days) windows of UTC days into folds.

    Instances are placed by the timestamp of their label click.  The last
    ``valid_fraction`` of each fold's training instances, ordered by time,
    is held out for validation.
    """
    if train_days <= 0 or test_days <= 0:
        raise DataError("train_days and test_days must be positive")
    if not instances:
        raise DataError("no instances to split")
    ordered = sorted(instances, key=_instance_order)
    days = np.array([i.timestamp // DAY for i in ordered])
    first, last = int(days[0]), int(days[-1])
    available = last - first + 1
    width = train_days + test_days
    n_folds = available // width
    if n_folds == 0:
        raise DataError(f"need at least {width} days of data, have {available}")
    split = FoldSplit(train_days, test_days)
    for f in range(n_folds):
        start = first + f * width
        train = [ordered[i] for i in np.flatnonzero((days >= start) & (days < start + train_days))]
        test = [ordered[i] for i in
                np.flatnonzero((days >= start + train_days) & (days < start + width))]
        n_valid = int(round(len(train) * valid_fraction))
        cut = len(train) - n_valid
        split.folds.append(Fold(train[:cut], train[cut:], test,
                                train_end=(start + train_days) * DAY))
    return split


def dataset_stats(sessions: Sequence[Session], catalog: Catalog) -> dict:
    n_clicks = sum(len(s) for s in sessions)
    clicked = {c.article_id for s in sessions for c in s.clicks}
    return {
        "sessions": len(sessions),
        "clicks": n_clicks,
        "articles": len(clicked),
        "catalog_articles": len(catalog),
        "topics": int(len(np.unique(catalog.topics))),
        "clicks_per_session": n_clicks / len(sessions) if sessions else 0.0,
        "clicks_per_article": n_clicks / len(clicked) if clicked else 0.0,
    }
