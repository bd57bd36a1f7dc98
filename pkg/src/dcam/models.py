"""Baseline CTR model (target attention + Bias Net) and the context-gated DCAM.

Baseline::

    o = MLP_M(concat(e_u, e_i, S, MP(e_b), e_c)) + MLP_B(e_c)

DCAM replaces the plain context concat with a gated one::

    weight   = sigmoid(MLP(concat(e_c, e_input)))            e_input = concat(e_u, e_i, S)
    weight_k = top_k_filter(weight, k)
    A_output = concat(e_input, flatten(weight_k[:, :, None] * e_c))
    o        = MLP_M(concat(A_output, MP(e_b))) + MLP_B(e_c)

``e_c`` always has six ``d_c``-wide slots in ``CONTEXT_FEATURES`` order; a
feature switched off by the feature mask occupies its slot as zeros.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import encoders as enc
from . import tensor as T
from .features import (
    CONTEXT_FEATURES,
    L_MAX,
    PERIOD_OF_HOUR,
    Dataset,
    hash_ids,
    sequence_item_index,
)
from .tensor import Tensor

ENCODERS = ("mean_pool", "mhta", "self_attn+mhta", "gru", "mhta+time_diff", "self_attn+pos_enc")
MODEL_KINDS = ("baseline", "dcam")
FIELDS = ("Ct", "Us", "It", "Sq")
# features an event carries itself (events have no city or AOI)
SEQUENCE_FEATURES = ("hour", "time_period", "week", "geohash")
_DIRECT_VOCAB = {"hour": 24, "time_period": 5, "week": 7}


def _default_fields() -> dict[str, list[str]]:
    return {name: ["Ct"] for name in CONTEXT_FEATURES}


def _default_vocab() -> dict[str, int]:
    return {"user": 4096, "item": 2048, "seq_item": 2048, "geohash": 1024, "city": 1024,
            "aoi": 4096}


@dataclass
class ModelConfig:
    kind: str = "baseline"
    encoder: str = "mhta"
    use_bias_net: bool = True
    k: int = 4
    feature_fields: dict[str, list[str]] = field(default_factory=_default_fields)
    d_c: int = 8
    d_u: int = 16
    d_i: int = 16
    d_seq_item: int = 12
    d_time: int = 4
    heads: int = 2
    main_hidden: list[int] = field(default_factory=lambda: [64, 32])
    bias_hidden: list[int] = field(default_factory=lambda: [16])
    stfam_hidden: list[int] = field(default_factory=lambda: [32])
    vocab: dict[str, int] = field(default_factory=_default_vocab)
    l_max: int = L_MAX
    time_boundaries: list[int] = field(default_factory=lambda: list(enc.DEFAULT_BOUNDARIES))

    def problems(self) -> list[str]:
        out = []
        if self.kind not in MODEL_KINDS:
            out.append(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.encoder not in ENCODERS:
            out.append(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if not 1 <= self.k <= 6:
            out.append(f"k must lie in 1..6, got {self.k}")
        for name, dests in self.feature_fields.items():
            if name not in CONTEXT_FEATURES:
                out.append(f"unknown context feature {name!r}")
                continue
            for d in dests:
                if d not in FIELDS:
                    out.append(f"feature {name!r}: unknown destination field {d!r}")
            if "Sq" in dests and name not in SEQUENCE_FEATURES:
                out.append(f"feature {name!r} cannot join the sequence field (events lack it)")
        for name in ("d_c", "d_u", "d_i", "d_seq_item", "d_time", "heads", "l_max"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.heads >= 1 and self.event_width % self.heads:
            out.append(f"event width {self.event_width} not divisible by {self.heads} heads")
        for name in ("user", "item", "seq_item", "geohash", "city", "aoi"):
            if self.vocab.get(name, 0) < 2:
                out.append(f"vocab[{name!r}] must be at least 2")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def routed(self, dest: str) -> list[str]:
        return [n for n in CONTEXT_FEATURES if dest in self.feature_fields.get(n, ())]

    @property
    def uses_time_diff(self) -> bool:
        return self.encoder == "mhta+time_diff"

    @property
    def event_width(self) -> int:
        return (self.d_seq_item + (self.d_time if self.uses_time_diff else 0)
                + self.d_c * len(self.routed("Sq")))

    @property
    def user_width(self) -> int:
        return self.d_u + self.d_c * len(self.routed("Us"))

    @property
    def item_width(self) -> int:
        return self.d_i + self.d_c * len(self.routed("It"))

    @property
    def interest_width(self) -> int:
        return 0 if self.encoder == "mean_pool" else self.event_width

    @property
    def input_width(self) -> int:
        """Width of ``e_input = concat(e_u, e_i, S)``."""
        return self.user_width + self.item_width + self.interest_width

    @property
    def main_input_width(self) -> int:
        return self.input_width + self.event_width + 6 * self.d_c

    def context_vocab(self, name: str) -> int:
        return _DIRECT_VOCAB.get(name) or self.vocab[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.feature_fields = {k: list(v) for k, v in cfg.feature_fields.items()}
        return cfg


# ---------------------------------------------------------------------------
# encoded inputs
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Embedding row indices for a set of impressions."""

    user: np.ndarray  # [N]
    item: np.ndarray  # [N]
    ctx: np.ndarray  # [N, 6]
    seq_item: np.ndarray  # [N, L], 0 = padding
    seq_bucket: np.ndarray  # [N, L]
    seq_ctx: np.ndarray  # [N, L, 4] in SEQUENCE_FEATURES order
    mask: np.ndarray  # [N, L] float 0/1
    label: np.ndarray  # [N] float
    group: np.ndarray  # [N] raw user ids

    def __len__(self) -> int:
        return len(self.label)

    def take(self, index) -> "Batch":
        return Batch(**{f.name: getattr(self, f.name)[index] for f in fields(self)})


def encode(ds: Dataset, cfg: ModelConfig) -> Batch:
    """Hash raw ids and bucket time gaps into embedding row indices."""
    v = cfg.vocab
    L = cfg.l_max
    n = len(ds)
    # keep the newest L events, still left-aligned oldest first
    if ds.l_max > L:
        shift = np.maximum(ds.seq_len - L, 0)
        cols = np.arange(L)[None, :] + shift[:, None]
        rows = np.arange(n)[:, None]
        seq_item_raw, seq_ts, seq_geo = (a[rows, cols] for a in (ds.seq_item, ds.seq_ts,
                                                                 ds.seq_geohash))
        seq_len = np.minimum(ds.seq_len, L)
    else:
        pad = L - ds.l_max
        seq_item_raw, seq_ts, seq_geo = (np.pad(a, ((0, 0), (0, pad))) for a in
                                         (ds.seq_item, ds.seq_ts, ds.seq_geohash))
        seq_len = ds.seq_len
    mask = (np.arange(L)[None, :] < seq_len[:, None]).astype(np.float64)
    valid = mask.astype(bool)

    ctx = np.stack([
        ds.hour,
        PERIOD_OF_HOUR[ds.hour],
        ds.week,
        hash_ids(ds.geohash, v["geohash"]),
        hash_ids(ds.city_id, v["city"]),
        hash_ids(ds.aoi_id, v["aoi"]),
    ], axis=1).astype(np.int64)

    bucketizer = enc.TimeDiffBucketizer(tuple(cfg.time_boundaries))
    delta = np.where(valid, ds.decision_ts[:, None] - seq_ts, 0)
    seq_bucket = np.where(valid, bucketizer.buckets(delta), 0)
    seq_item = np.where(valid, sequence_item_index(seq_item_raw, v["seq_item"]), 0)

    ev_hour = (seq_ts // 3600) % 24
    ev_week = ((seq_ts // 86400) + 3) % 7
    seq_ctx = np.stack([ev_hour, PERIOD_OF_HOUR[ev_hour], ev_week,
                        hash_ids(seq_geo, v["geohash"])], axis=2)
    seq_ctx = np.where(valid[:, :, None], seq_ctx, 0).astype(np.int64)

    return Batch(
        user=hash_ids(ds.user_id, v["user"]),
        item=hash_ids(ds.item_id, v["item"]),
        ctx=ctx,
        seq_item=seq_item.astype(np.int64),
        seq_bucket=seq_bucket.astype(np.int64),
        seq_ctx=seq_ctx,
        mask=mask,
        label=ds.label.astype(np.float64),
        group=ds.user_id.copy(),
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _mlp_params(rng, prefix: str, widths: list[int]) -> dict[str, np.ndarray]:
    out = {}
    for j, (m, n) in enumerate(zip(widths, widths[1:])):
        out[f"{prefix}/{j}/W"] = _xavier(rng, m, n)
        out[f"{prefix}/{j}/b"] = np.zeros(n)
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform Glorot matrices and zero biases, drawn in a fixed order from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    v = cfg.vocab
    p: dict[str, np.ndarray] = {
        "emb/user": _xavier(rng, v["user"], cfg.d_u),
        "emb/item": _xavier(rng, v["item"], cfg.d_i),
        "emb/seq_item": _xavier(rng, v["seq_item"], cfg.d_seq_item),
    }
    if cfg.uses_time_diff:
        p["emb/time_bucket"] = _xavier(rng, len(cfg.time_boundaries) + 1, cfg.d_time)
    for name in CONTEXT_FEATURES:
        if cfg.feature_fields.get(name):
            p[f"emb/ctx/{name}"] = _xavier(rng, cfg.context_vocab(name), cfg.d_c)
    d = cfg.event_width
    if cfg.encoder in ("self_attn+mhta", "self_attn+pos_enc"):
        for w in ("W_Q", "W_K", "W_V"):
            p[f"sa/{w}"] = _xavier(rng, d, d)
    if cfg.encoder == "gru":
        for gate in ("z", "r", "h"):
            p[f"gru/W_{gate}"] = _xavier(rng, d, d)
            p[f"gru/U_{gate}"] = _xavier(rng, d, d)
            p[f"gru/b_{gate}"] = np.zeros(d)
    elif cfg.encoder != "mean_pool":
        p["mhta/W_Q"] = _xavier(rng, cfg.item_width, d)
        p["mhta/W_K"] = _xavier(rng, d, d)
        p["mhta/W_V"] = _xavier(rng, d, d)
    if cfg.kind == "dcam":
        p.update(_mlp_params(rng, "stfam", [6 * cfg.d_c + cfg.input_width,
                                            *cfg.stfam_hidden, 6]))
    p.update(_mlp_params(rng, "main", [cfg.main_input_width, *cfg.main_hidden, 1]))
    if cfg.use_bias_net:
        p.update(_mlp_params(rng, "bias", [6 * cfg.d_c, *cfg.bias_hidden, 1]))
    return p


def _layers(params, prefix: str) -> list[tuple]:
    out, j = [], 0
    while f"{prefix}/{j}/W" in params:
        out.append((params[f"{prefix}/{j}/W"], params[f"{prefix}/{j}/b"]))
        j += 1
    if not out:
        raise KeyError(f"no layers named {prefix}/*")
    return out


def mlp(x, layers, final_activation: str = "none") -> Tensor:
    """ReLU hidden layers, then ``final_activation`` on the last one."""
    for j, (W, b) in enumerate(layers):
        last = j == len(layers) - 1
        x = T.dense_forward(x, W, b, final_activation if last else "relu")
    return x


# ---------------------------------------------------------------------------
# StFAM
# ---------------------------------------------------------------------------

@dataclass
class StFAMParams:
    layers: list[tuple]  # [(W, b), ...]; the last layer has width 6
    k: int = 4

    def __post_init__(self):
        if not 1 <= self.k <= 6:
            raise ValueError(f"k must lie in 1..6, got {self.k}")
        last_w = self.layers[-1][0]
        width = (last_w.shape if isinstance(last_w, Tensor) else np.shape(last_w))[1]
        if width != 6:
            raise ValueError(f"StFAM weight network must end in width 6, got {width}")


def _flatten_context(e_c) -> Tensor:
    e_c = T.as_tensor(e_c)
    if e_c.ndim != 3 or e_c.shape[1] != 6:
        raise ValueError(f"context embedding must be [B, 6, d_c], got {e_c.shape}")
    B, _, d_c = e_c.shape
    return T.reshape(e_c, (B, 6 * d_c))


def stfam_weights(e_c, e_input, params: StFAMParams) -> Tensor:
    """Per-slot gates in (0, 1): ``sigmoid(MLP(concat(flatten(e_c), e_input)))``."""
    flat = _flatten_context(e_c)
    e_input = T.as_tensor(e_input)
    if e_input.ndim != 2 or e_input.shape[0] != flat.shape[0]:
        raise ValueError(f"e_input {e_input.shape} does not match context batch {flat.shape[0]}")
    return mlp(T.concat([flat, e_input], axis=1), params.layers, "sigmoid")


def top_k_mask(weight: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries per row; ties go to the lower slot index."""
    weight = np.asarray(weight, dtype=np.float64)
    if not 1 <= k <= weight.shape[-1]:
        raise ValueError(f"k must lie in 1..{weight.shape[-1]}, got {k}")
    order = np.argsort(-weight, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(weight)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def top_k_filter(weight, k: int) -> Tensor:
    """Keep the k largest gates per row at their values, zero the rest.

    The selection is a constant for differentiation: gradients reach only
    the kept entries.
    """
    weight = T.as_tensor(weight)
    if weight.ndim != 2 or weight.shape[1] != 6:
        raise ValueError(f"gate tensor must be [B, 6], got {weight.shape}")
    if not 1 <= k <= 6:
        raise ValueError(f"k must lie in 1..6, got {k}")
    return weight * top_k_mask(weight.data, k)


def gate_context(weight_k, e_c) -> Tensor:
    """``reshape(weight_k, [B, 6, 1]) * e_c``, flattened to ``[B, 6 * d_c]``."""
    weight_k = T.as_tensor(weight_k)
    e_c = T.as_tensor(e_c)
    B = e_c.shape[0]
    return _flatten_context(T.reshape(weight_k, (B, 6, 1)) * e_c)


def stfam_forward(e_c, e_input, params: StFAMParams, return_weights: bool = False):
    """``A_output = concat(e_input, flatten(top_k(weight) * e_c))``."""
    weight = stfam_weights(e_c, e_input, params)
    weight_k = top_k_filter(weight, params.k)
    out = T.concat([T.as_tensor(e_input), gate_context(weight_k, e_c)], axis=1)
    if return_weights:
        return out, weight_k.data
    return out


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------

@dataclass
class Parts:
    """Intermediate representations shared by both model kinds."""

    e_u: Tensor
    e_i: Tensor
    e_c: Tensor  # [B, 6, d_c]
    e_b: Tensor  # [B, L, d]
    mask: np.ndarray
    S: Tensor | None

    @property
    def e_input(self) -> Tensor:
        return T.concat([self.e_u, self.e_i] + ([self.S] if self.S is not None else []), axis=1)


def _context_slot(params, cfg: ModelConfig, name: str, index: np.ndarray) -> Tensor:
    return T.take_rows(params[f"emb/ctx/{name}"], index)


def embed(params, batch: Batch, cfg: ModelConfig) -> Parts:
    B, L = batch.mask.shape
    zeros = np.zeros((B, cfg.d_c))
    slots = []
    for j, name in enumerate(CONTEXT_FEATURES):
        if "Ct" in cfg.feature_fields.get(name, ()):
            slots.append(_context_slot(params, cfg, name, batch.ctx[:, j]))
        else:
            slots.append(T.Tensor(zeros))
    e_c = T.reshape(T.concat(slots, axis=1), (B, 6, cfg.d_c))

    user_parts = [T.take_rows(params["emb/user"], batch.user)]
    user_parts += [_context_slot(params, cfg, n, batch.ctx[:, CONTEXT_FEATURES.index(n)])
                   for n in cfg.routed("Us")]
    item_parts = [T.take_rows(params["emb/item"], batch.item)]
    item_parts += [_context_slot(params, cfg, n, batch.ctx[:, CONTEXT_FEATURES.index(n)])
                   for n in cfg.routed("It")]
    e_u = user_parts[0] if len(user_parts) == 1 else T.concat(user_parts, axis=1)
    e_i = item_parts[0] if len(item_parts) == 1 else T.concat(item_parts, axis=1)

    mask = batch.mask
    event_parts = [T.take_rows(params["emb/seq_item"], batch.seq_item)]
    if cfg.uses_time_diff:
        event_parts.append(T.take_rows(params["emb/time_bucket"], batch.seq_bucket))
    for name in cfg.routed("Sq"):
        event_parts.append(_context_slot(params, cfg, name,
                                         batch.seq_ctx[:, :, SEQUENCE_FEATURES.index(name)]))
    e_b = event_parts[0] if len(event_parts) == 1 else T.concat(event_parts, axis=2)
    e_b = e_b * mask[:, :, None]

    S = interest(params, e_i, e_b, mask, cfg)
    return Parts(e_u, e_i, e_c, e_b, mask, S)


def interest(params, e_i, e_b, mask, cfg: ModelConfig) -> Tensor | None:
    """The user-interest vector ``S`` produced by the configured sequence encoder."""
    if cfg.encoder == "mean_pool":
        return None
    if cfg.encoder == "gru":
        gru = enc.GRUParams(*(params[f"gru/{n}"] for n in
                              ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")))
        return enc.gru_encode(e_b, mask, gru)
    if cfg.encoder.startswith("self_attn"):
        sa = enc.MHTAParams(params["sa/W_Q"], params["sa/W_K"], params["sa/W_V"], cfg.heads)
        e_b = enc.self_attention_encode(e_b, mask, sa,
                                        position_encoding=cfg.encoder == "self_attn+pos_enc")
    target = enc.MHTAParams(params["mhta/W_Q"], params["mhta/W_K"], params["mhta/W_V"], cfg.heads)
    return enc.mhta(e_i, e_b, mask, target)


def _finish(params, parts: Parts, main_in: Tensor, cfg: ModelConfig, use_bias_net: bool) -> Tensor:
    if main_in.shape[1] != params["main/0/W"].shape[0]:
        raise ValueError(f"Main Net expects width {params['main/0/W'].shape[0]}, "
                         f"got {main_in.shape[1]}")
    B = main_in.shape[0]
    logit = mlp(main_in, _layers(params, "main"))
    if use_bias_net:
        logit = logit + mlp(_flatten_context(parts.e_c), _layers(params, "bias"))
    return T.reshape(logit, (B,))


def baseline_forward(batch: Batch, params, cfg: ModelConfig,
                     use_bias_net: bool | None = None) -> Tensor:
    use_bias_net = cfg.use_bias_net if use_bias_net is None else use_bias_net
    parts = embed(params, batch, cfg)
    pieces = [parts.e_u, parts.e_i] + ([parts.S] if parts.S is not None else [])
    pieces += [enc.mean_pool(parts.e_b, parts.mask), _flatten_context(parts.e_c)]
    return _finish(params, parts, T.concat(pieces, axis=1), cfg, use_bias_net)


def dcam_forward(batch: Batch, params, cfg: ModelConfig,
                 use_bias_net: bool | None = None) -> Tensor:
    use_bias_net = cfg.use_bias_net if use_bias_net is None else use_bias_net
    parts = embed(params, batch, cfg)
    stfam = StFAMParams(_layers(params, "stfam"), cfg.k)
    a_output = stfam_forward(parts.e_c, parts.e_input, stfam)
    main_in = T.concat([a_output, enc.mean_pool(parts.e_b, parts.mask)], axis=1)
    return _finish(params, parts, main_in, cfg, use_bias_net)


def forward(batch: Batch, params, cfg: ModelConfig) -> Tensor:
    if cfg.kind == "dcam":
        return dcam_forward(batch, params, cfg)
    return baseline_forward(batch, params, cfg)


def predict_logits(batch: Batch, params, cfg: ModelConfig, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(batch))
    for start in range(0, len(batch), chunk):
        sl = slice(start, start + chunk)
        out[sl] = forward(batch.take(sl), params, cfg).data
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DCAMCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Header (magic, version, JSON manifest) followed by little-endian float64 payloads.

    The manifest carries the model config and the ordered ``(name, shape)``
    list; tensors follow in that order.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in params.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                              offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelConfig.from_dict(header["config"]), params, header.get("extra", {})
