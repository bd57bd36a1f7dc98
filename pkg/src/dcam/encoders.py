"""Behavior-sequence encoders: target attention, mean pooling, self-attention, GRU.

All encoders take event embeddings ``e_b: [B, L, d]`` and a 0/1 ``mask: [B, L]``
marking valid positions (valid events first, oldest to newest).
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9

# 60 s * 2**j for j = 0..14, i.e. 1 minute up to ~22.8 days
DEFAULT_BOUNDARIES = tuple(60 * 2**j for j in range(15))


@dataclass(frozen=True)
class TimeDiffBucketizer:
    """Maps a non-negative time gap in seconds to one of ``len(boundaries) + 1`` buckets."""

    boundaries: tuple[int, ...] = DEFAULT_BOUNDARIES

    def __post_init__(self):
        b = tuple(self.boundaries)
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("bucket boundaries must be strictly increasing")
        if b and b[0] <= 0:
            raise ValueError("first bucket boundary must be positive")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_buckets(self) -> int:
        return len(self.boundaries) + 1

    def bucket(self, delta: float) -> int:
        if delta < 0:
            raise ValueError(f"negative time difference {delta}: event lies after the decision time")
        return bisect_right(self.boundaries, delta)

    def buckets(self, delta: np.ndarray) -> np.ndarray:
        delta = np.asarray(delta)
        if np.any(delta < 0):
            raise ValueError("negative time difference: event lies after the decision time")
        return np.searchsorted(np.asarray(self.boundaries), delta, side="right").astype(np.int64)


def time_diff_bucket(decision_ts: int, event_ts: int,
                     bucketizer: TimeDiffBucketizer = TimeDiffBucketizer()) -> int:
    return bucketizer.bucket(decision_ts - event_ts)


@dataclass
class MHTAParams:
    W_Q: Tensor | np.ndarray  # [d_i, d]
    W_K: Tensor | np.ndarray  # [d, d]
    W_V: Tensor | np.ndarray  # [d, d]
    heads: int = 2

    def __post_init__(self):
        d = np.shape(_data(self.W_K))[1]
        if d % self.heads:
            raise ValueError(f"model width {d} is not divisible by {self.heads} heads")


@dataclass
class GRUParams:
    """Input projections ``W_*: [d, d_h]``, recurrent ``U_*: [d_h, d_h]``, biases ``b_*: [d_h]``."""

    W_z: Tensor | np.ndarray
    U_z: Tensor | np.ndarray
    b_z: Tensor | np.ndarray
    W_r: Tensor | np.ndarray
    U_r: Tensor | np.ndarray
    b_r: Tensor | np.ndarray
    W_h: Tensor | np.ndarray
    U_h: Tensor | np.ndarray
    b_h: Tensor | np.ndarray

    @property
    def hidden(self) -> int:
        return np.shape(_data(self.U_z))[0]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [B, L, d] -> [B, h, L, d/h]
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray):
    """Masked scaled dot-product attention over the key axis.

    ``q: [B, h, Lq, dh]``, ``k, v: [B, h, L, dh]``, ``mask: [B, L]``.
    Returns outputs ``[B, h, Lq, dh]`` and the attention weights.
    """
    dh = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    key_mask = mask[:, None, None, :]
    scores = scores + (1.0 - key_mask) * MASK_VALUE
    # multiplying by the mask zeroes rows with no valid key at all
    weights = T.softmax(scores, axis=-1) * key_mask
    return T.matmul(weights, v), weights


def mhta(e_i, e_b, mask, params: MHTAParams, return_weights: bool = False):
    """Multi-head target attention with the candidate item as the single query.

    Returns ``S: [B, d]`` (heads concatenated in order) and optionally the
    per-head attention weights ``[B, h, L]``.
    """
    e_i, e_b = T.as_tensor(e_i), T.as_tensor(e_b)
    mask = np.asarray(mask, dtype=np.float64)
    W_Q, W_K, W_V = (T.as_tensor(w) for w in (params.W_Q, params.W_K, params.W_V))
    B, L, d = e_b.shape
    if e_i.ndim != 2 or e_i.shape[0] != B or e_i.shape[1] != W_Q.shape[0]:
        raise ValueError(f"mhta: query {e_i.shape} does not match W_Q {W_Q.shape} / batch {B}")
    if W_K.shape[0] != d or W_V.shape[0] != d or W_Q.shape[1] != W_K.shape[1]:
        raise ValueError(f"mhta: events {e_b.shape} do not match W_K {W_K.shape} / W_V {W_V.shape}")
    if mask.shape != (B, L):
        raise ValueError(f"mhta: mask {mask.shape} does not match events {e_b.shape}")
    h = params.heads
    dm = W_Q.shape[1]
    q = T.reshape(T.matmul(e_i, W_Q), (B, h, 1, dm // h))
    k = _split_heads(T.matmul(e_b, W_K), h)
    v = _split_heads(T.matmul(e_b, W_V), h)
    out, weights = _attend(q, k, v, mask)
    S = T.reshape(out, (B, dm))
    if return_weights:
        return S, weights.data[:, :, 0, :]
    return S


def mean_pool(e_b, mask) -> Tensor:
    """Masked mean over the sequence axis; rows without valid events give zeros."""
    e_b = T.as_tensor(e_b)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != e_b.shape[:2]:
        raise ValueError(f"mean_pool: mask {mask.shape} does not match events {e_b.shape}")
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return T.sum(e_b * mask[:, :, None], axis=1) * (1.0 / count)


def sinusoidal_positions(mask: np.ndarray, d: int) -> np.ndarray:
    """Additive sinusoidal encoding indexed by distance from the newest event.

    Position 0 is the most recent valid event; padding rows are zero.
    """
    mask = np.asarray(mask, dtype=np.float64)
    lengths = mask.sum(axis=1, keepdims=True)
    pos = (lengths - 1.0 - np.arange(mask.shape[1])[None, :]) * mask
    i = np.arange(d)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    angles = pos[:, :, None] * rates[None, None, :]
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return pe * mask[:, :, None]


def self_attention_encode(e_b, mask, params: MHTAParams, position_encoding: bool = False,
                          return_weights: bool = False):
    """One multi-head self-attention layer with a residual connection.

    Queries, keys and values all come from the (optionally position-encoded)
    events; padded positions neither attend nor are attended to, and their
    output rows are zero.
    """
    e_b = T.as_tensor(e_b)
    mask = np.asarray(mask, dtype=np.float64)
    W_Q, W_K, W_V = (T.as_tensor(w) for w in (params.W_Q, params.W_K, params.W_V))
    B, L, d = e_b.shape
    if mask.shape != (B, L):
        raise ValueError(f"self-attention: mask {mask.shape} does not match events {e_b.shape}")
    for name, w in (("W_Q", W_Q), ("W_K", W_K), ("W_V", W_V)):
        if w.shape != (d, d):
            raise ValueError(f"self-attention: {name} {w.shape} does not match event width {d}")
    x = e_b + sinusoidal_positions(mask, d) if position_encoding else e_b
    h = params.heads
    q = _split_heads(T.matmul(x, W_Q), h)
    k = _split_heads(T.matmul(x, W_K), h)
    v = _split_heads(T.matmul(x, W_V), h)
    out, weights = _attend(q, k, v, mask)
    merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, L, d))
    y = (x + merged) * mask[:, :, None]
    if return_weights:
        return y, weights.data
    return y


def gru_encode(e_b, mask, params: GRUParams) -> Tensor:
    """Final hidden state of a GRU run over valid positions in time order.

    ``z = sigmoid(x W_z + h U_z + b_z)``, ``r = sigmoid(x W_r + h U_r + b_r)``,
    ``h~ = tanh(x W_h + (r * h) U_h + b_h)``, ``h' = (1 - z) * h + z * h~``.
    Masked steps carry the previous state through unchanged.
    """
    e_b = T.as_tensor(e_b)
    mask = np.asarray(mask, dtype=np.float64)
    B, L, d = e_b.shape
    W_z, W_r, W_h = (T.as_tensor(w) for w in (params.W_z, params.W_r, params.W_h))
    if W_z.shape[0] != d:
        raise ValueError(f"gru: events {e_b.shape} do not match input weights {W_z.shape}")
    if mask.shape != (B, L):
        raise ValueError(f"gru: mask {mask.shape} does not match events {e_b.shape}")
    hidden = params.hidden
    # input projections for all steps at once: [B, L, 3 * d_h]
    W_in = T.concat([W_z, W_r, W_h], axis=1)
    b_in = T.concat([params.b_z, params.b_r, params.b_h], axis=0)
    xs = T.matmul(e_b, W_in) + b_in
    U_zr = T.concat([params.U_z, params.U_r], axis=1)
    U_h = T.as_tensor(params.U_h)
    h = T.Tensor(np.zeros((B, hidden)))
    for t in range(L):
        m = mask[:, t:t + 1]
        if not m.any():
            continue
        x_t = xs[:, t, :]
        zr = T.sigmoid(x_t[:, :2 * hidden] + T.matmul(h, U_zr))
        z, r = zr[:, :hidden], zr[:, hidden:]
        cand = T.tanh(x_t[:, 2 * hidden:] + T.matmul(r * h, U_h))
        h_new = h + z * (cand - h)
        h = h_new * m + h * (1.0 - m)
    return h
