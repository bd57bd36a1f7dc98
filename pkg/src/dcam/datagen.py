"""Synthetic spatiotemporal clickstream with planted, known click effects.

Click labels come from a logistic ground truth::

    logit = b0 + w_week[week] + w_hour[hour] + w_geo[cell] + w_city[city]
            + w_aoi[aoi] + affinity(user, item) + seq_effect

``affinity`` is a rank-r bilinear form over latent user/item vectors.
``seq_effect`` rewards candidates whose category (``item_id % 16``) matches
events in the user's behavior sequence; with ``seq_tau`` set, each match is
discounted by ``exp(-gap / seq_tau)`` so only recent events count, otherwise
it is the fraction of matching events and carries no order information.

Context fields are drawn independently of each other and of the user, so a
zero weight makes a feature pure noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .features import Dataset, L_MAX, geohash_encode, geohash_to_int, write_jsonl

N_CATEGORIES = 16
SECONDS_PER_DAY = 86400
CHUNK = 50_000
# Monday 2023-02-06 00:00:00 UTC
DEFAULT_START_TS = 1675641600
# lunch and dinner peaks, a quiet night
DEFAULT_HOUR_TRAFFIC = (
    0.4, 0.3, 0.2, 0.1, 0.1, 0.2, 0.5, 1.0, 1.2, 1.0, 1.5, 3.0,
    3.0, 1.5, 1.0, 1.0, 1.2, 2.0, 2.5, 1.8, 1.2, 1.0, 0.8, 0.6,
)
EFFECTS = ("week", "hour", "geo", "city", "aoi")


@dataclass
class GenConfig:
    n_users: int = 2000
    n_items: int = 800
    n_impressions: int = 200_000
    seed: int = 0
    n_geo: int = 64
    n_cities: int = 16
    n_aois: int = 512
    n_days: int = 28
    start_ts: int = DEFAULT_START_TS
    b0: float = 0.0
    w_week: list[float] = field(default_factory=lambda: [0.0] * 7)
    w_hour: list[float] = field(default_factory=lambda: [0.0] * 24)
    w_geo: list[float] = field(default_factory=list)
    w_city: list[float] = field(default_factory=list)
    w_aoi: list[float] = field(default_factory=list)
    hour_traffic: list[float] = field(default_factory=lambda: list(DEFAULT_HOUR_TRAFFIC))
    affinity_rank: int = 4
    affinity_scale: float = 0.0
    seq_weight: float = 0.0
    seq_tau: float | None = None
    seq_len_min: int = 0
    seq_len_max: int = L_MAX
    seq_gap_mean: float = 8 * 3600.0
    candidate_pref_share: float = 0.5
    candidate_seq_share: float = 0.0
    user_concentration: float = 0.3
    eval_fraction: float = 0.2

    def __post_init__(self):
        for name, n in (("w_geo", self.n_geo), ("w_city", self.n_cities), ("w_aoi", self.n_aois)):
            if not getattr(self, name):
                setattr(self, name, [0.0] * n)
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("n_users", "n_items", "n_impressions", "n_geo", "n_cities", "n_aois",
                     "n_days", "affinity_rank"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.n_items % N_CATEGORIES:
            problems.append(f"n_items must be a multiple of {N_CATEGORIES}")
        expected = {"w_week": 7, "w_hour": 24, "w_geo": self.n_geo, "w_city": self.n_cities,
                    "w_aoi": self.n_aois, "hour_traffic": 24}
        for name, n in expected.items():
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if values.shape != (n,):
                problems.append(f"{name} must have {n} entries, got {values.size}")
            elif not np.all(np.isfinite(values)):
                problems.append(f"{name} has non-finite entries")
        if any(v < 0 for v in self.hour_traffic) or not sum(self.hour_traffic) > 0:
            problems.append("hour_traffic must be non-negative with a positive total")
        if not 0 <= self.seq_len_min <= self.seq_len_max:
            problems.append("need 0 <= seq_len_min <= seq_len_max")
        if self.seq_tau is not None and self.seq_tau <= 0:
            problems.append("seq_tau must be positive when set")
        shares = (self.candidate_pref_share, self.candidate_seq_share)
        if min(shares) < 0.0 or sum(shares) > 1.0:
            problems.append("candidate_pref_share and candidate_seq_share must be "
                            "non-negative and sum to at most 1")
        if not 0.0 <= self.eval_fraction < 1.0:
            problems.append("eval_fraction must lie in [0, 1)")
        for name in ("b0", "affinity_scale", "seq_weight", "seq_gap_mean", "user_concentration"):
            if not math.isfinite(getattr(self, name)):
                problems.append(f"{name} must be finite")
        if problems:
            raise ValueError("invalid GenConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def planted(cls, scales: dict[str, float], seed: int = 0, **overrides) -> "GenConfig":
        """Config whose effect tables are zero-mean, unit-variance draws times ``scales[name]``.

        ``scales`` keys are among ``week, hour, geo, city, aoi``; missing keys
        get zero weight. Draws depend only on ``seed``.
        """
        unknown = set(scales) - set(EFFECTS)
        if unknown:
            raise ValueError(f"unknown effects {sorted(unknown)}")
        cfg = cls(seed=seed, **overrides)
        rng = np.random.default_rng([seed, 7])
        sizes = {"week": 7, "hour": 24, "geo": cfg.n_geo, "city": cfg.n_cities, "aoi": cfg.n_aois}
        for name in EFFECTS:
            raw = rng.standard_normal(sizes[name])
            raw = (raw - raw.mean()) / raw.std()
            setattr(cfg, f"w_{name}", (scales.get(name, 0.0) * raw).tolist())
        cfg.validate()
        return cfg


def acceptance_config(seed: int = 0, **overrides) -> GenConfig:
    """Week-dominant world used by the learning acceptance checks."""
    base = dict(n_impressions=200_000, affinity_scale=0.26, seq_weight=0.3, seq_tau=None)
    base.update(overrides)
    return GenConfig.planted({"week": 0.66, "hour": 0.31, "geo": 0.31, "city": 0.22, "aoi": 0.18},
                             seed=seed, **base)


def noise_context_config(seed: int = 0, **overrides) -> GenConfig:
    """Informative hour (hence time period), week and geohash; city and AOI are pure noise.

    Few users and items keep the id embeddings well estimated, so the noisy
    high-cardinality city and AOI slots are the main route to overfitting.
    """
    base = dict(n_impressions=100_000, n_users=300, n_items=32, n_cities=256, n_aois=2048,
                affinity_scale=0.3,
                seq_weight=0.3, seq_tau=None)
    base.update(overrides)
    return GenConfig.planted({"week": 0.6, "hour": 0.6, "geo": 0.6}, seed=seed, **base)


def recency_config(seed: int = 0, **overrides) -> GenConfig:
    """Sequence-driven world where only recent category matches raise the click rate.

    Candidates usually repeat the category of one of the user's own past
    events, so knowing *which* event is recent carries signal that an
    order-free summary of the sequence lacks.
    """
    base = dict(n_impressions=100_000, n_users=300, n_items=32, user_concentration=5.0,
                affinity_scale=0.2, seq_weight=3.0, seq_tau=4 * 3600.0, seq_len_min=1, seq_len_max=10,
                seq_gap_mean=6 * 3600.0, candidate_seq_share=0.6, candidate_pref_share=0.0)
    base.update(overrides)
    return GenConfig.planted({"week": 0.3, "hour": 0.3}, seed=seed, **base)


# ---------------------------------------------------------------------------
# world and impression sampling
# ---------------------------------------------------------------------------

@dataclass
class World:
    """Latent quantities shared by every impression of one config."""

    user_vec: np.ndarray  # [n_users, r]
    item_vec: np.ndarray  # [n_items, r]
    user_pref_cdf: np.ndarray  # [n_users, 16]
    geo_codes: np.ndarray  # [n_geo] 25-bit geohash codes

    def to_dict(self) -> dict:
        from .features import int_to_geohash
        return {
            "user_vec": self.user_vec.tolist(),
            "item_vec": self.item_vec.tolist(),
            "user_category_cdf": self.user_pref_cdf.tolist(),
            "geohash_cells": [int_to_geohash(int(c)) for c in self.geo_codes],
        }


def build_world(cfg: GenConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 0])
    r = cfg.affinity_rank
    user_vec = rng.standard_normal((cfg.n_users, r)) / math.sqrt(r)
    item_vec = rng.standard_normal((cfg.n_items, r))
    prefs = rng.dirichlet(np.full(N_CATEGORIES, cfg.user_concentration), size=cfg.n_users)
    cdf = np.cumsum(prefs, axis=1)
    cdf[:, -1] = 1.0
    # distinct precision-5 cells scattered around one metro area
    cells: list[int] = []
    seen = set()
    while len(cells) < cfg.n_geo:
        lat = 30.25 + rng.uniform(-0.6, 0.6)
        lon = 120.15 + rng.uniform(-0.6, 0.6)
        code = geohash_to_int(geohash_encode(lat, lon))
        if code not in seen:
            seen.add(code)
            cells.append(code)
    return World(user_vec, item_vec, cdf, np.array(cells, dtype=np.int64))


def item_raw_id(index: np.ndarray) -> np.ndarray:
    """Raw id of item ``index``; its category is ``raw_id % 16``."""
    return (index + N_CATEGORIES).astype(np.uint64)


def _item_in_category(rng, category: np.ndarray, per_cat: int) -> np.ndarray:
    return rng.integers(0, per_cat, size=category.shape) * N_CATEGORIES + category


def _draw_chunk(cfg: GenConfig, world: World, rng: np.random.Generator, n: int) -> dict:
    per_cat = cfg.n_items // N_CATEGORIES
    users = rng.integers(0, cfg.n_users, size=n)
    cdf = world.user_pref_cdf[users]

    def pref_category(shape_tail):
        u = rng.random((n,) + shape_tail)
        c = (cdf.reshape((n,) + (1,) * len(shape_tail) + (N_CATEGORIES,)) < u[..., None]).sum(-1)
        return np.minimum(c, N_CATEGORIES - 1)

    traffic = np.asarray(cfg.hour_traffic, dtype=np.float64)
    hours = rng.choice(24, size=n, p=traffic / traffic.sum())
    days = rng.integers(0, cfg.n_days, size=n)
    ts = cfg.start_ts + days * SECONDS_PER_DAY + hours * 3600 + rng.integers(0, 3600, size=n)
    week = ((ts // SECONDS_PER_DAY) + 3) % 7  # 1970-01-01 was a Thursday
    geo = rng.integers(0, cfg.n_geo, size=n)
    city = rng.integers(0, cfg.n_cities, size=n)
    aoi = rng.integers(0, cfg.n_aois, size=n)

    L = cfg.seq_len_max
    lengths = rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1, size=n)
    # gaps[:, 0] separates the newest event from the decision time
    gaps = rng.exponential(cfg.seq_gap_mean, size=(n, L))
    age_newest_first = np.cumsum(gaps, axis=1)
    seq_cat_newest_first = pref_category((L,))
    seq_item_newest_first = _item_in_category(rng, seq_cat_newest_first, per_cat)
    seq_geo_newest_first = rng.integers(0, cfg.n_geo, size=(n, L))
    valid_newest_first = np.arange(L)[None, :] < lengths[:, None]

    # candidate category: copied from a random own event, else from preferences, else uniform
    source = rng.random(n)
    from_seq = (source < cfg.candidate_seq_share) & (lengths > 0)
    from_pref = ~from_seq & (source < cfg.candidate_seq_share + cfg.candidate_pref_share)
    picked = np.floor(rng.random(n) * np.maximum(lengths, 1)).astype(np.int64)
    cand_cat = np.where(from_pref, pref_category(()), rng.integers(0, N_CATEGORIES, size=n))
    cand_cat = np.where(from_seq, seq_cat_newest_first[np.arange(n), picked], cand_cat)
    items = _item_in_category(rng, cand_cat, per_cat)

    # left-align oldest-first: position j holds newest-first index len-1-j
    j = np.arange(L)[None, :]
    src = np.clip(lengths[:, None] - 1 - j, 0, L - 1)
    valid = j < lengths[:, None]
    rows = np.arange(n)[:, None]
    age = np.where(valid, np.floor(age_newest_first[rows, src]).astype(np.int64), 0)
    seq_ts = np.where(valid, ts[:, None] - age, 0)
    seq_item = np.where(valid, seq_item_newest_first[rows, src], 0)
    seq_geo = np.where(valid, world.geo_codes[seq_geo_newest_first[rows, src]], 0)

    match = (seq_cat_newest_first == cand_cat[:, None]) & valid_newest_first
    if cfg.seq_tau is None:
        seq_effect = match.sum(axis=1) / np.maximum(lengths, 1)
    else:
        exact_age = np.floor(age_newest_first)
        seq_effect = (match * np.exp(-exact_age / cfg.seq_tau)).sum(axis=1)
    logit = (
        cfg.b0
        + np.asarray(cfg.w_week)[week]
        + np.asarray(cfg.w_hour)[hours]
        + np.asarray(cfg.w_geo)[geo]
        + np.asarray(cfg.w_city)[city]
        + np.asarray(cfg.w_aoi)[aoi]
        + cfg.affinity_scale * np.einsum("nr,nr->n", world.user_vec[users], world.item_vec[items])
        + cfg.seq_weight * seq_effect
    )
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
    return {
        "users": users, "items": items, "ts": ts, "hours": hours, "week": week,
        "geo": geo, "city": city, "aoi": aoi, "lengths": lengths,
        "seq_ts": seq_ts, "seq_item": seq_item, "seq_geo": seq_geo,
        "logit": logit, "labels": labels,
    }


def _chunks(total: int):
    shard = 0
    for start in range(0, total, CHUNK):
        yield shard, min(CHUNK, total - start)
        shard += 1


def generate(cfg: GenConfig) -> tuple[Dataset, dict]:
    """Draw ``cfg.n_impressions`` samples; returns the dataset and its manifest.

    Impressions are produced in fixed-size shards, each from its own
    ``(seed, 1, shard)`` random stream, so output is reproducible bit for bit.
    The manifest lists every planted parameter plus the per-sample true logits'
    summary; the Monte-Carlo Bayes AUC is added by :func:`write_dataset`.
    """
    cfg.validate()
    world = build_world(cfg)
    parts = [_draw_chunk(cfg, world, np.random.default_rng([cfg.seed, 1, shard]), n)
             for shard, n in _chunks(cfg.n_impressions)]
    col = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    valid = np.arange(cfg.seq_len_max)[None, :] < col["lengths"][:, None]
    ds = Dataset(
        user_id=(col["users"] + 1).astype(np.uint64),
        item_id=item_raw_id(col["items"]),
        decision_ts=col["ts"].astype(np.int64),
        label=col["labels"],
        hour=col["hours"].astype(np.int64),
        week=col["week"].astype(np.int64),
        geohash=world.geo_codes[col["geo"]],
        city_id=(col["city"] + 1).astype(np.uint64),
        aoi_id=(col["aoi"] + 1).astype(np.uint64),
        seq_item=np.where(valid, item_raw_id(col["seq_item"]), 0).astype(np.uint64),
        seq_ts=col["seq_ts"].astype(np.int64),
        seq_geohash=col["seq_geo"].astype(np.int64),
        seq_len=col["lengths"].astype(np.int64),
    )
    manifest = {
        "config": cfg.to_dict(),
        "world": world.to_dict(),
        "categories": f"item_id % {N_CATEGORIES}",
        "empirical_ctr": float(ds.label.mean()),
        "true_logit_mean": float(col["logit"].mean()),
        "true_logit_std": float(col["logit"].std()),
    }
    return ds, manifest


def true_logits(cfg: GenConfig) -> np.ndarray:
    """Ground-truth logits of the impressions :func:`generate` produces for ``cfg``."""
    world = build_world(cfg)
    return np.concatenate([
        _draw_chunk(cfg, world, np.random.default_rng([cfg.seed, 1, shard]), n)["logit"]
        for shard, n in _chunks(cfg.n_impressions)
    ])


@dataclass
class BayesAUC:
    value: float
    se: float
    n_mc: int


def bayes_auc(cfg: GenConfig, n_mc: int = 200_000) -> BayesAUC:
    """Monte-Carlo AUC of the true logit against freshly drawn labels.

    Uses random streams disjoint from the dataset's. The standard error is
    the Hanley-McNeil estimate for the drawn class counts.
    """
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    world = build_world(cfg)
    logits, labels = [], []
    for shard, n in _chunks(n_mc):
        chunk = _draw_chunk(cfg, world, np.random.default_rng([cfg.seed, 2, shard]), n)
        logits.append(chunk["logit"])
        labels.append(chunk["labels"])
    logit = np.concatenate(logits)
    y = np.concatenate(labels)
    try:
        value = metrics.auc(logit, y)
    except metrics.UndefinedMetric:
        return BayesAUC(0.5, 0.0, n_mc)
    n_pos = int(y.sum())
    return BayesAUC(value, metrics.hanley_mcneil_se(value, n_pos, n_mc - n_pos), n_mc)


def split(ds: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/eval split drawn from the ``(seed, 3)`` stream."""
    perm = np.random.default_rng([seed, 3]).permutation(len(ds))
    n_eval = int(round(len(ds) * eval_fraction))
    return ds.subset(np.sort(perm[n_eval:])), ds.subset(np.sort(perm[:n_eval]))


def write_dataset(cfg: GenConfig, out_dir, n_mc: int = 200_000) -> dict:
    """Generate, split and write ``train.jsonl``, ``eval.jsonl`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, manifest = generate(cfg)
    train, evaluation = split(ds, cfg.eval_fraction, cfg.seed)
    write_jsonl(train, out / "train.jsonl")
    write_jsonl(evaluation, out / "eval.jsonl")
    bayes = bayes_auc(cfg, n_mc)
    manifest["bayes_auc"] = {"value": bayes.value, "se": bayes.se, "n_mc": bayes.n_mc}
    manifest["files"] = {"train": "train.jsonl", "eval": "eval.jsonl",
                         "n_train": len(train), "n_eval": len(evaluation)}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
