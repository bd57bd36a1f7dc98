"""Samples, spatiotemporal context, id hashing and embedding lookup.

Records are kept columnar in :class:`Dataset` (one numpy array per field,
behavior sequences left-aligned in ``[N, L_max]`` arrays) so that 10^5-scale
files load without materialising per-event Python objects. The record-level
types (:class:`Sample`, :class:`ContextFeatures`, :class:`BehaviorEvent`) are
what the JSONL file format describes and what ``Dataset.sample`` returns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoders import TimeDiffBucketizer
from .tensor import Tensor

CONTEXT_FEATURES = ("hour", "time_period", "week", "geohash", "city", "aoi")
L_MAX = 20
GEOHASH_PRECISION = 5
_BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_BASE32_INDEX = {ch: i for i, ch in enumerate(_BASE32)}


class TimePeriod(IntEnum):
    BREAKFAST = 0
    LUNCH = 1
    AFTERNOON_TEA = 2
    DINNER = 3
    SUPPER = 4

    @property
    def label(self) -> str:
        return self.name.lower()


# breakfast 05-09, lunch 10-13, afternoon tea 14-16, dinner 17-20, supper 21-04
PERIOD_OF_HOUR = np.array(
    [4] * 5 + [0] * 5 + [1] * 4 + [2] * 3 + [3] * 4 + [4] * 3, dtype=np.int64
)


def time_period_of_hour(hour: int) -> TimePeriod:
    if not 0 <= hour <= 23:
        raise ValueError(f"hour must be in 0..23, got {hour}")
    return TimePeriod(int(PERIOD_OF_HOUR[hour]))


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """SplitMix64 finalizer on an unsigned 64-bit integer."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def hash_id(raw_id: int, vocab_size: int) -> int:
    """``mix64(raw_id) mod vocab_size``; identical on every platform."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be positive")
    return mix64(int(raw_id) & _MASK64) % vocab_size


def hash_ids(raw_ids, vocab_size: int) -> np.ndarray:
    """Vectorised :func:`hash_id` using wrapping uint64 arithmetic."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be positive")
    z = np.asarray(raw_ids).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z % np.uint64(vocab_size)).astype(np.int64)


# ---------------------------------------------------------------------------
# geohash
# ---------------------------------------------------------------------------

def geohash_encode(lat: float, lon: float, precision: int = GEOHASH_PRECISION) -> str:
    lat_lo, lat_hi, lon_lo, lon_hi = -90.0, 90.0, -180.0, 180.0
    bits, even = 0, True
    out = []
    for n in range(precision * 5):
        if even:
            mid = (lon_lo + lon_hi) / 2
            bit = lon >= mid
            lon_lo, lon_hi = (mid, lon_hi) if bit else (lon_lo, mid)
        else:
            mid = (lat_lo + lat_hi) / 2
            bit = lat >= mid
            lat_lo, lat_hi = (mid, lat_hi) if bit else (lat_lo, mid)
        even = not even
        bits = (bits << 1) | int(bit)
        if n % 5 == 4:
            out.append(_BASE32[bits])
            bits = 0
    return "".join(out)


def geohash_to_int(cell: str) -> int:
    if len(cell) != GEOHASH_PRECISION:
        raise ValueError(f"geohash {cell!r} must have {GEOHASH_PRECISION} characters")
    value = 0
    for ch in cell:
        try:
            value = (value << 5) | _BASE32_INDEX[ch]
        except KeyError:
            raise ValueError(f"invalid geohash character {ch!r} in {cell!r}") from None
    return value


def int_to_geohash(code: int) -> str:
    chars = []
    for _ in range(GEOHASH_PRECISION):
        chars.append(_BASE32[code & 31])
        code >>= 5
    return "".join(reversed(chars))


# ---------------------------------------------------------------------------
# record types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextFeatures:
    hour: int
    week: int  # Monday = 0
    geohash: str
    city_id: int
    aoi_id: int

    def __post_init__(self):
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour must be in 0..23, got {self.hour}")
        if not 0 <= self.week <= 6:
            raise ValueError(f"week must be in 0..6, got {self.week}")
        geohash_to_int(self.geohash)
        if self.city_id < 0 or self.aoi_id < 0:
            raise ValueError("city_id and aoi_id must be non-negative")

    @property
    def time_period(self) -> TimePeriod:
        return time_period_of_hour(self.hour)


@dataclass(frozen=True)
class BehaviorEvent:
    item_id: int
    timestamp: int
    geohash: str


@dataclass(frozen=True)
class Sample:
    user_id: int
    item_id: int
    decision_ts: int
    behavior: tuple[BehaviorEvent, ...]
    context: ContextFeatures
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        ts = [e.timestamp for e in self.behavior]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError("behavior events must be sorted by timestamp")
        if ts and ts[-1] > self.decision_ts:
            raise ValueError("behavior event after the decision timestamp")

    def to_record(self) -> dict:
        c = self.context
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "decision_ts": self.decision_ts,
            "label": self.label,
            "context": {"hour": c.hour, "week": c.week, "geohash": c.geohash,
                        "city_id": c.city_id, "aoi_id": c.aoi_id},
            "behavior": [{"item_id": e.item_id, "ts": e.timestamp, "geohash": e.geohash}
                         for e in self.behavior],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Sample":
        c = rec["context"]
        return cls(
            user_id=int(rec["user_id"]),
            item_id=int(rec["item_id"]),
            decision_ts=int(rec["decision_ts"]),
            behavior=tuple(BehaviorEvent(int(e["item_id"]), int(e["ts"]), e["geohash"])
                           for e in rec["behavior"]),
            context=ContextFeatures(int(c["hour"]), int(c["week"]), c["geohash"],
                                    int(c["city_id"]), int(c["aoi_id"])),
            label=int(rec["label"]),
        )


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    name: str
    vocab_size: int
    dim: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.vocab_size, self.dim):
            raise ValueError(f"table {self.name!r}: weights {self.weights.shape} "
                             f"!= ({self.vocab_size}, {self.dim})")

    @classmethod
    def zeros(cls, name: str, vocab_size: int, dim: int) -> "EmbeddingTable":
        return cls(name, vocab_size, dim, np.zeros((vocab_size, dim)))

    def lookup(self, index) -> Tensor:
        return T.take_rows(self.weights, index)


# minimum vocabularies for the directly indexed context fields
_DIRECT_CARDINALITY = {"hour": 24, "time_period": 5, "week": 7}


def context_indices(c: ContextFeatures, vocab_sizes: Sequence[int]) -> list[int]:
    """Row index of each context feature, in ``CONTEXT_FEATURES`` order."""
    hour_v, period_v, week_v, geo_v, city_v, aoi_v = vocab_sizes
    for name, v in zip(CONTEXT_FEATURES[:3], (hour_v, period_v, week_v)):
        if v < _DIRECT_CARDINALITY[name]:
            raise ValueError(f"{name} table needs at least {_DIRECT_CARDINALITY[name]} rows, got {v}")
    return [
        c.hour,
        int(c.time_period),
        c.week,
        hash_id(geohash_to_int(c.geohash), geo_v),
        hash_id(c.city_id, city_v),
        hash_id(c.aoi_id, aoi_v),
    ]


def _ordered_tables(tables) -> list[EmbeddingTable]:
    if isinstance(tables, Mapping):
        missing = [n for n in CONTEXT_FEATURES if n not in tables]
        if missing:
            raise ValueError(f"missing context tables: {missing}")
        return [tables[n] for n in CONTEXT_FEATURES]
    tables = list(tables)
    if len(tables) != len(CONTEXT_FEATURES):
        raise ValueError(f"expected {len(CONTEXT_FEATURES)} context tables, got {len(tables)}")
    return tables


def embed_context(c: ContextFeatures, tables) -> Tensor:
    """``[6, d_c]`` context embedding, one row per feature in fixed order."""
    tables = _ordered_tables(tables)
    dims = {t.dim for t in tables}
    if len(dims) != 1:
        raise ValueError(f"context tables must share one dimension, got {sorted(dims)}")
    idx = context_indices(c, [t.vocab_size for t in tables])
    return T.concat([t.lookup([i]) for t, i in zip(tables, idx)], axis=0)


def sequence_item_index(item_ids, vocab_size: int) -> np.ndarray:
    """Hash item ids into ``1..vocab_size-1``; row 0 is reserved for padding."""
    return 1 + hash_ids(item_ids, vocab_size - 1)


def embed_sequence(events: Sequence[BehaviorEvent], item_table: EmbeddingTable,
                   bucketizer: TimeDiffBucketizer, decision_ts: int,
                   bucket_table: EmbeddingTable | None = None, l_max: int = L_MAX):
    """Per-event embeddings ``[l_max, d]`` and the 0/1 validity mask ``[l_max]``.

    Each event is its item embedding, concatenated with its time-gap bucket
    embedding when ``bucket_table`` is given. Only the newest ``l_max`` events
    are kept; padding rows are zero.
    """
    events = list(events)[-l_max:]
    n = len(events)
    item_idx = np.zeros(l_max, dtype=np.int64)
    bucket_idx = np.zeros(l_max, dtype=np.int64)
    mask = np.zeros(l_max)
    if n:
        item_idx[:n] = sequence_item_index([e.item_id for e in events], item_table.vocab_size)
        bucket_idx[:n] = bucketizer.buckets([decision_ts - e.timestamp for e in events])
        mask[:n] = 1.0
    parts = [item_table.lookup(item_idx)]
    if bucket_table is not None:
        parts.append(bucket_table.lookup(bucket_idx))
    emb = T.concat(parts, axis=1) * mask[:, None]
    return emb, mask


# ---------------------------------------------------------------------------
# columnar dataset and file format
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Columnar impressions. Behavior arrays are ``[N, l_max]``, left-aligned, oldest first."""

    user_id: np.ndarray
    item_id: np.ndarray
    decision_ts: np.ndarray
    label: np.ndarray
    hour: np.ndarray
    week: np.ndarray
    geohash: np.ndarray  # 25-bit integer codes
    city_id: np.ndarray
    aoi_id: np.ndarray
    seq_item: np.ndarray
    seq_ts: np.ndarray
    seq_geohash: np.ndarray
    seq_len: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    @property
    def l_max(self) -> int:
        return self.seq_item.shape[1]

    @property
    def time_period(self) -> np.ndarray:
        return PERIOD_OF_HOUR[self.hour]

    @property
    def seq_mask(self) -> np.ndarray:
        return (np.arange(self.l_max)[None, :] < self.seq_len[:, None]).astype(np.float64)

    def subset(self, index) -> "Dataset":
        return Dataset(**{name: getattr(self, name)[index] for name in self.__dataclass_fields__})

    def sample(self, i: int) -> Sample:
        n = int(self.seq_len[i])
        behavior = tuple(
            BehaviorEvent(int(self.seq_item[i, j]), int(self.seq_ts[i, j]),
                          int_to_geohash(int(self.seq_geohash[i, j])))
            for j in range(n)
        )
        ctx = ContextFeatures(int(self.hour[i]), int(self.week[i]),
                              int_to_geohash(int(self.geohash[i])),
                              int(self.city_id[i]), int(self.aoi_id[i]))
        return Sample(int(self.user_id[i]), int(self.item_id[i]), int(self.decision_ts[i]),
                      behavior, ctx, int(self.label[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], l_max: int = L_MAX) -> "Dataset":
        cols = _Columns(l_max)
        for s in samples:
            cols.append(s.to_record())
        return cols.build()


class _Columns:
    def __init__(self, l_max: int):
        self.l_max = l_max
        self.scalars = {k: [] for k in ("user_id", "item_id", "decision_ts", "label", "hour",
                                        "week", "geohash", "city_id", "aoi_id", "seq_len")}
        self.seq_item, self.seq_ts, self.seq_geo = [], [], []

    def append(self, rec: Mapping) -> None:
        c = rec["context"]
        label = int(rec["label"])
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label}")
        behavior = rec["behavior"][-self.l_max:]
        s = self.scalars
        s["user_id"].append(int(rec["user_id"]))
        s["item_id"].append(int(rec["item_id"]))
        s["decision_ts"].append(int(rec["decision_ts"]))
        s["label"].append(label)
        s["hour"].append(int(c["hour"]))
        s["week"].append(int(c["week"]))
        s["geohash"].append(geohash_to_int(c["geohash"]))
        s["city_id"].append(int(c["city_id"]))
        s["aoi_id"].append(int(c["aoi_id"]))
        s["seq_len"].append(len(behavior))
        pad = self.l_max - len(behavior)
        self.seq_item.append([int(e["item_id"]) for e in behavior] + [0] * pad)
        self.seq_ts.append([int(e["ts"]) for e in behavior] + [0] * pad)
        self.seq_geo.append([geohash_to_int(e["geohash"]) for e in behavior] + [0] * pad)

    def build(self) -> Dataset:
        s = self.scalars
        n = len(s["label"])
        shape = (n, self.l_max)
        ds = Dataset(
            user_id=np.array(s["user_id"], dtype=np.uint64),
            item_id=np.array(s["item_id"], dtype=np.uint64),
            decision_ts=np.array(s["decision_ts"], dtype=np.int64),
            label=np.array(s["label"], dtype=np.int64),
            hour=np.array(s["hour"], dtype=np.int64),
            week=np.array(s["week"], dtype=np.int64),
            geohash=np.array(s["geohash"], dtype=np.int64),
            city_id=np.array(s["city_id"], dtype=np.uint64),
            aoi_id=np.array(s["aoi_id"], dtype=np.uint64),
            seq_item=np.array(self.seq_item, dtype=np.uint64).reshape(shape),
            seq_ts=np.array(self.seq_ts, dtype=np.int64).reshape(shape),
            seq_geohash=np.array(self.seq_geo, dtype=np.int64).reshape(shape),
            seq_len=np.array(s["seq_len"], dtype=np.int64),
        )
        validate_dataset(ds)
        return ds


def validate_dataset(ds: Dataset) -> None:
    if np.any((ds.hour < 0) | (ds.hour > 23)):
        raise ValueError("hour outside 0..23")
    if np.any((ds.week < 0) | (ds.week > 6)):
        raise ValueError("week outside 0..6")
    if np.any((ds.label != 0) & (ds.label != 1)):
        raise ValueError("labels must be 0 or 1")
    mask = ds.seq_mask.astype(bool)
    if np.any(mask & (ds.seq_ts > ds.decision_ts[:, None])):
        raise ValueError("behavior event after the decision timestamp")
    later = ds.seq_ts[:, 1:] < ds.seq_ts[:, :-1]
    if np.any(later & mask[:, 1:]):
        raise ValueError("behavior events must be sorted by timestamp")


def read_jsonl(path, l_max: int = L_MAX) -> Dataset:
    cols = _Columns(l_max)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                cols.append(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    return cols.build()


def write_jsonl(ds: Dataset, path) -> None:
    path = Path(path)
    geo_names = {}

    def geo(code: int) -> str:
        name = geo_names.get(code)
        if name is None:
            name = geo_names[code] = int_to_geohash(code)
        return name

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(ds)):
            n = int(ds.seq_len[i])
            rec = {
                "user_id": int(ds.user_id[i]),
                "item_id": int(ds.item_id[i]),
                "decision_ts": int(ds.decision_ts[i]),
                "label": int(ds.label[i]),
                "context": {"hour": int(ds.hour[i]), "week": int(ds.week[i]),
                            "geohash": geo(int(ds.geohash[i])),
                            "city_id": int(ds.city_id[i]), "aoi_id": int(ds.aoi_id[i])},
                "behavior": [{"item_id": int(ds.seq_item[i, j]), "ts": int(ds.seq_ts[i, j]),
                              "geohash": geo(int(ds.seq_geohash[i, j]))} for j in range(n)],
            }
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")
