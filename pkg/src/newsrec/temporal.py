"""Duration buckets and calendar-field embeddings.

The date-time table stacks five calendar fields into one 134-row matrix:

    rows   0..11   month
    rows  12..42   day of month
    rows  43..49   weekday (Monday = 0)
    rows  50..73   hour
    rows  74..133  minute

All calendar fields are taken in UTC.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from newsrec import tensor as T
from newsrec.tensor import Parameter

FIELDS = ("month", "day", "weekday", "hour", "minute")
FIELD_SIZES = (12, 31, 7, 24, 60)
FIELD_OFFSETS = tuple(int(x) for x in np.cumsum((0,) + FIELD_SIZES[:-1]))
TABLE_ROWS = sum(FIELD_SIZES)  # 134

UNKNOWN_DURATION = None
DEFAULT_DURATION_CATEGORIES = 12


def duration_bucket(seconds, m: int = DEFAULT_DURATION_CATEGORIES):
    """floor(log2 t) clamped to [0, m-1]; ``None``/NaN maps to the unknown row ``m``.

    Works on scalars and on arrays (NaN marks unknown entries in arrays).
    """
    if seconds is None:
        return m
    arr = np.asarray(seconds, dtype=np.float64)
    unknown = np.isnan(arr)
    safe = np.where(unknown | (arr < 1.0), 1.0, arr)
    bucket = np.clip(np.floor(np.log2(safe)).astype(np.int64), 0, m - 1)
    bucket = np.where(unknown, m, bucket)
    return int(bucket) if bucket.ndim == 0 else bucket


def datetime_fields(ts) -> np.ndarray:
    """Zero-based (month, day, weekday, hour, minute) for epoch seconds, UTC."""
    ts = np.asarray(ts, dtype=np.int64)
    days = np.floor_divide(ts, 86400)
    secs = ts - days * 86400
    d64 = days.astype("datetime64[D]")
    months = d64.astype("datetime64[M]")
    month = months.astype(np.int64) % 12
    day = (d64 - months.astype("datetime64[D]")).astype(np.int64)
    weekday = (days + 3) % 7  # 1970-01-01 was a Thursday
    hour = secs // 3600
    minute = (secs % 3600) // 60
    return np.stack([month, day, weekday, hour, minute], axis=-1)


def datetime_rows(ts) -> np.ndarray:
    """Row indices into the 134-row table, shape (..., 5)."""
    return datetime_fields(ts) + np.asarray(FIELD_OFFSETS)


def start_rows(ts) -> np.ndarray:
    """Weekday and hour rows, shape (..., 2)."""
    return datetime_rows(ts)[..., 2:4]


@dataclass
class TimeEmbeddings:
    """Date-time and duration tables.

    In shared mode ``start_table`` is the very same Parameter as
    ``publish_table``, so both lookups read and train one matrix.
    """

    publish_table: Parameter
    start_table: Parameter
    duration_table: Parameter

    @classmethod
    def create(cls, d_t: int, m: int, rng: np.random.Generator, *, shared: bool = True,
               std: float = 0.002, rng_start: np.random.Generator | None = None,
               rng_duration: np.random.Generator | None = None) -> "TimeEmbeddings":
        publish = Parameter("time_table", rng.normal(0.0, std, (TABLE_ROWS, d_t)))
        if shared:
            start = publish
        else:
            start = Parameter("start_time_table",
                              (rng_start or rng).normal(0.0, std, (TABLE_ROWS, d_t)))
        duration = Parameter("duration_table",
                             (rng_duration or rng).normal(0.0, std, (m + 1, d_t)))
        return cls(publish, start, duration)

    @property
    def shared(self) -> bool:
        return self.start_table is self.publish_table

    @property
    def d_t(self) -> int:
        return self.publish_table.shape[1]

    @property
    def m(self) -> int:
        return self.duration_table.shape[0] - 1

    def parameters(self) -> list[Parameter]:
        params = [self.publish_table]
        if not self.shared:
            params.append(self.start_table)
        params.append(self.duration_table)
        return params

    def encode_duration(self, buckets: np.ndarray) -> T.Tensor:
        return T.embedding(self.duration_table, buckets)

    def encode_datetime_full(self, rows: np.ndarray) -> T.Tensor:
        """(..., 5) rows -> (..., 5*d_t) in month, day, weekday, hour, minute order."""
        rows = np.asarray(rows)
        looked = T.embedding(self.publish_table, rows)
        return T.reshape(looked, rows.shape[:-1] + (5 * self.d_t,))

    def encode_start_time(self, rows: np.ndarray) -> T.Tensor:
        """(..., 2) weekday/hour rows -> (..., 2*d_t)."""
        rows = np.asarray(rows)
        looked = T.embedding(self.start_table, rows)
        return T.reshape(looked, rows.shape[:-1] + (2 * self.d_t,))


def _table_rows(table: np.ndarray, prefix: str = ""):
    for name, offset, size in zip(FIELDS, FIELD_OFFSETS, FIELD_SIZES):
        for i in range(size):
            yield prefix + name, i, table[offset + i]


def export_time_embeddings(temb: TimeEmbeddings, path) -> int:
    """Write one CSV row per embedding entry: group, index, d_t values.

    Values are written with ``repr`` so that reading them back is bit exact.
    Returns the number of rows written.
    """
    rows = list(_table_rows(temb.publish_table.data))
    if not temb.shared:
        rows += list(_table_rows(temb.start_table.data, prefix="start_"))
    for i, vec in enumerate(temb.duration_table.data):
        rows.append(("duration", i, vec))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "index"] + [f"v{j}" for j in range(temb.d_t)])
        for group, i, vec in rows:
            w.writerow([group, i] + [repr(float(x)) for x in vec])
    return len(rows)


def import_time_embeddings(path) -> dict[str, np.ndarray]:
    """Read an export back into arrays keyed like the parameters."""
    groups: dict[str, dict[int, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            groups.setdefault(row[0], {})[int(row[1])] = [float(x) for x in row[2:]]

    def stack(prefix: str) -> np.ndarray:
        parts = []
        for name, size in zip(FIELDS, FIELD_SIZES):
            g = groups[prefix + name]
            parts.extend(g[i] for i in range(size))
        return np.array(parts)

    out = {"time_table": stack("")}
    if "start_month" in groups:
        out["start_time_table"] = stack("start_")
    dur = groups["duration"]
    out["duration_table"] = np.array([dur[i] for i in range(len(dur))])
    return out
