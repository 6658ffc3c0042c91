"""Synthetic click corpora with planted, learnable structure.

Generation rules (all driven by one seed):

* Articles are spread uniformly in publish time over the corpus span (plus a
  pre-publish lead-in).  Each gets a topic, a content vector = unit topic
  centroid + Gaussian noise, and a log-normal appeal.
* Each session has a topic.  With probability ``start_time_weight`` that
  topic is the one planted for the session's (weekday, 3-hour block);
  otherwise it is uniform.
* A click is "bait" with probability ``bait_rate``: uniformly random topic and
  a 2-10 s dwell.  Otherwise it follows the session topic with probability
  ``topic_affinity`` and gets a long (log-normal, median 90 s) dwell.
* Among published, not-yet-clicked articles of the chosen topic, the clicked
  article is drawn with weight appeal * exp(-age / freshness_hours) (or
  appeal alone with probability 1 - ``freshness_weight``).
* Impressions for a session are the clicked articles plus their publish-order
  neighbours (``impression_radius`` each side, published before the click),
  and a few uniformly random articles per click (``impression_noise``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from newsrec.errors import ConfigError
from newsrec.ingest import Article, Catalog, ClickEvent, Session
from newsrec.seeding import derive_rng

HOUR = 3600
DAY = 86400
# 2021-01-04 00:00 UTC, a Monday
DEFAULT_START = 1609718400

DIURNAL = np.array([1, 0.5, 0.3, 0.3, 0.4, 0.8, 1.6, 2.6, 3.0, 2.6, 2.0, 2.0,
                    2.4, 2.2, 1.8, 1.8, 2.0, 2.2, 2.6, 3.0, 3.2, 2.8, 2.0, 1.4])


@dataclass
class SyntheticConfig:
    n_articles: int = 2000
    n_topics: int = 10
    n_sessions: int = 50000
    days: int = 8
    prepublish_days: float = 1.0
    d_c: int = 16
    mean_session_length: float = 2.69
    start: int = DEFAULT_START
    topic_affinity: float = 0.85
    start_time_weight: float = 0.0
    freshness_hours: float = 12.0
    freshness_weight: float = 1.0
    bait_rate: float = 0.0
    content_noise: float = 0.6
    appeal_sigma: float = 0.5
    repeat_user_rate: float = 0.1
    explicit_active_time: bool = True
    impression_radius: int = 10
    impression_noise: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_articles <= 0 or self.n_topics <= 0:
            raise ConfigError("n_articles and n_topics must be positive")
        if self.n_sessions <= 0 or self.days <= 0:
            raise ConfigError("n_sessions and days must be positive")
        if self.mean_session_length < 2:
            raise ConfigError("mean_session_length must be at least 2")
        if self.n_articles < self.n_topics:
            raise ConfigError("need at least one article per topic")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCorpus:
    events: list[ClickEvent]
    catalog: Catalog
    sessions: list[Session]                     # ground truth, keys match sessionize()
    impressions: dict[str, dict[int, bool]]
    session_topics: dict[str, int]
    hour_topics: np.ndarray                     # (7, 8) planted topic per weekday, 3h block
    config: SyntheticConfig
    bait: dict[str, list[bool]] = field(default_factory=dict)


def generate_synthetic(config: SyntheticConfig) -> SyntheticCorpus:
    c = config
    rng_art = derive_rng(c.seed, "synthetic", "articles")
    rng = derive_rng(c.seed, "synthetic", "sessions")
    rng_imp = derive_rng(c.seed, "synthetic", "impressions")

    # articles ------------------------------------------------------------
    lead = int(c.prepublish_days * DAY)
    span = c.days * DAY
    publish = np.sort(rng_art.integers(c.start - lead, c.start + span, size=c.n_articles))
    topics = rng_art.integers(0, c.n_topics, size=c.n_articles)
    topics[:c.n_topics] = np.arange(c.n_topics)  # every topic present
    rng_art.shuffle(topics)
    centroids = rng_art.normal(size=(c.n_topics, c.d_c))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    content = centroids[topics] + rng_art.normal(0, c.content_noise / np.sqrt(c.d_c),
                                                 (c.n_articles, c.d_c))
    appeal = rng_art.lognormal(0.0, c.appeal_sigma, size=c.n_articles)
    article_ids = np.arange(1, c.n_articles + 1)
    catalog = Catalog([Article(int(article_ids[i]), int(publish[i]), int(topics[i]), content[i])
                       for i in range(c.n_articles)])
    by_topic = [np.flatnonzero(topics == t) for t in range(c.n_topics)]
    hour_topics = rng_art.integers(0, c.n_topics, size=(7, 8))

    # sessions ------------------------------------------------------------
    diurnal = DIURNAL / DIURNAL.sum()
    sessions: list[Session] = []
    session_topics, bait_flags = {}, {}
    user_next: dict[str, int] = {}
    n_users = 0
    pending_repeat: list[tuple[str, int]] = []
    while len(sessions) < c.n_sessions:
        if pending_repeat and rng.random() < 0.5:
            user, earliest = pending_repeat.pop(0)
            start = earliest + int(rng.integers(31 * 60, 6 * HOUR))
            if start >= c.start + span:
                continue
        else:
            user = f"u{n_users:07d}"
            n_users += 1
            day = int(rng.integers(0, c.days))
            hour = int(rng.choice(24, p=diurnal))
            start = c.start + day * DAY + hour * HOUR + int(rng.integers(0, HOUR))
        fields_wd = ((start // DAY) + 3) % 7
        fields_hr = (start % DAY) // HOUR
        if rng.random() < c.start_time_weight:
            topic = int(hour_topics[fields_wd, fields_hr // 3])
        else:
            topic = int(rng.integers(0, c.n_topics))
        length = 2 + int(rng.poisson(c.mean_session_length - 2))

        clicks, flags, used = [], [], set()
        t = start
        for _ in range(length):
            is_bait = rng.random() < c.bait_rate
            if is_bait:
                ctopic = int(rng.integers(0, c.n_topics))
            elif rng.random() < c.topic_affinity:
                ctopic = topic
            else:
                ctopic = int(rng.integers(0, c.n_topics))
            cand = by_topic[ctopic]
            cand = cand[publish[cand] <= t]
            if used:
                cand = cand[~np.isin(cand, list(used))]
            if len(cand) == 0:
                break
            w = appeal[cand].copy()
            if rng.random() < c.freshness_weight:
                age_h = (t - publish[cand]) / HOUR
                w *= np.exp(-(age_h - age_h.min()) / c.freshness_hours)
            idx = int(cand[rng.choice(len(cand), p=w / w.sum())])
            used.add(idx)
            if is_bait:
                dwell = float(rng.uniform(2.0, 10.0))
            else:
                dwell = float(np.clip(rng.lognormal(np.log(90.0), 0.6), 20.0, 1200.0))
            clicks.append(ClickEvent(user, int(article_ids[idx]), int(t),
                                     round(dwell, 1) if c.explicit_active_time else None))
            flags.append(is_bait)
            t = t + int(dwell) + int(rng.integers(5, 60))
        if len(clicks) < 2:
            continue
        k = user_next.get(user, 0)
        user_next[user] = k + 1
        key = f"{user}#{k}"
        sessions.append(Session(key, clicks))
        session_topics[key] = topic
        bait_flags[key] = flags
        if rng.random() < c.repeat_user_rate:
            pending_repeat.append((user, clicks[-1].click_timestamp))

    # impressions ---------------------------------------------------------
    order = np.argsort(publish, kind="stable")  # publish already sorted; keeps intent explicit
    position = np.empty_like(order)
    position[order] = np.arange(len(order))
    impressions = {}
    for s in sessions:
        shown: dict[int, bool] = {}
        for click in s.clicks:
            idx = click.article_id - 1
            p = position[idx]
            lo, hi = max(p - c.impression_radius, 0), min(p + c.impression_radius + 1, len(order))
            for j in order[lo:hi]:
                if publish[j] <= click.click_timestamp:
                    shown.setdefault(int(article_ids[j]), False)
            for j in rng_imp.integers(0, c.n_articles, size=c.impression_noise):
                if publish[j] <= click.click_timestamp:
                    shown.setdefault(int(article_ids[j]), False)
        for click in s.clicks:
            shown[click.article_id] = True
        s.impressions = None
        impressions[s.key] = shown

    events = [e for s in sessions for e in s.clicks]
    events.sort(key=lambda e: (e.click_timestamp, e.user_key))
    sessions.sort(key=lambda s: (s.start_timestamp, s.key))
    return SyntheticCorpus(events, catalog, sessions, impressions, session_topics,
                           hour_topics, config, bait_flags)
