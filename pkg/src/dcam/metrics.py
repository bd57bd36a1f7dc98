"""Offline ranking metrics: AUC, GAUC, Logloss, NDCG@k."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


class UndefinedMetric(ValueError):
    """The metric has no value on this input (e.g. a single-class set)."""


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    # 1-based ranks, ties share the mean of the ranks they span
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    n = len(s)
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half).

    Rank-sum (Mann-Whitney) form, O(n log n). Raises :class:`UndefinedMetric`
    when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative")
    rank_sum = _average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _groups(group_ids, n):
    if group_ids is None:
        return [np.arange(n)]
    group_ids = np.asarray(group_ids)
    if len(group_ids) != n:
        raise ValueError("group_ids length differs from scores")
    order = np.argsort(group_ids, kind="mergesort")
    sorted_ids = group_ids[order]
    cuts = np.flatnonzero(sorted_ids[1:] != sorted_ids[:-1]) + 1
    return np.split(order, cuts)


def gauc(scores, labels, group_ids) -> tuple[float, int]:
    """Impression-weighted mean of per-group AUC.

    Groups with a single class are skipped. Returns ``(gauc, n_skipped)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    total, weight, skipped = 0.0, 0, 0
    for idx in _groups(group_ids, len(scores)):
        y = labels[idx]
        n_pos = int((y == 1).sum())
        if n_pos == 0 or n_pos == len(y):
            skipped += 1
            continue
        total += len(idx) * auc(scores[idx], y)
        weight += len(idx)
    if weight == 0:
        raise UndefinedMetric("GAUC needs at least one group with both classes")
    return total / weight, skipped


def logloss(probs, labels, eps: float = 1e-15) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def ndcg(scores, labels, group_ids=None, k: int = 10) -> tuple[float, int]:
    """Mean NDCG@k over groups that contain at least one positive.

    Gain ``2**rel - 1`` with binary relevance, discount ``log2(rank + 1)``;
    equal scores keep their input order. Returns ``(ndcg, n_skipped)``.
    """
    if k < 1:
        raise ValueError("k must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(labels, dtype=np.float64)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    values, skipped = [], 0
    for idx in _groups(group_ids, len(scores)):
        g = rel[idx]
        if not np.any(g > 0):
            skipped += 1
            continue
        ranked = g[np.argsort(-scores[idx], kind="stable")][:k]
        ideal = np.sort(g)[::-1][:k]
        dcg = ((2.0 ** ranked - 1.0) * discounts[:len(ranked)]).sum()
        idcg = ((2.0 ** ideal - 1.0) * discounts[:len(ideal)]).sum()
        values.append(dcg / idcg)
    if not values:
        raise UndefinedMetric("NDCG needs at least one group with a positive")
    return float(np.mean(values)), skipped


@dataclass
class EvalReport:
    auc: float
    gauc: float
    logloss: float
    ndcg: float
    k: int = 10
    n_samples: int = 0
    gauc_skipped_groups: int = 0
    ndcg_skipped_groups: int = 0
    group_key: str = "user_id"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_text(self) -> str:
        header = f"groups keyed by {self.group_key}; n={self.n_samples}"
        rows = [
            ("AUC", self.auc),
            ("GAUC", self.gauc),
            ("Logloss", self.logloss),
            (f"NDCG@{self.k}", self.ndcg),
        ]
        body = "\n".join(f"{name:<10}{value:>10.5f}" for name, value in rows)
        skipped = (f"skipped groups: gauc={self.gauc_skipped_groups} "
                   f"ndcg={self.ndcg_skipped_groups}")
        return f"{header}\n{body}\n{skipped}"


def evaluate(probs, labels, group_ids=None, k: int = 10, group_key: str = "user_id") -> EvalReport:
    """All four metrics; undefined values are reported as NaN rather than raised."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    try:
        a = auc(probs, labels)
    except UndefinedMetric:
        a = math.nan
    try:
        g, g_skip = gauc(probs, labels, group_ids)
    except UndefinedMetric:
        g, g_skip = math.nan, len(_groups(group_ids, len(probs)))
    try:
        nd, nd_skip = ndcg(probs, labels, group_ids, k)
    except UndefinedMetric:
        nd, nd_skip = math.nan, len(_groups(group_ids, len(probs)))
    return EvalReport(a, g, logloss(probs, labels), nd, k, len(labels), g_skip, nd_skip, group_key)


def hanley_mcneil_se(auc_value: float, n_pos: int, n_neg: int) -> float:
    """Standard error of an AUC estimate (Hanley & McNeil, 1982)."""
    a = auc_value
    q1 = a / (2.0 - a)
    q2 = 2.0 * a * a / (1.0 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))
