"""Tiny model configurations and hand-built batches shared by several test files."""
import numpy as np

from dcam import models
from dcam import tensor as T
from dcam.features import CONTEXT_FEATURES

TINY_VOCAB = {"user": 8, "item": 8, "seq_item": 8, "geohash": 8, "city": 8, "aoi": 8}


def tiny_config(**kw) -> models.ModelConfig:
    base = dict(d_c=2, d_u=2, d_i=2, d_seq_item=4, d_time=2, heads=2, main_hidden=[8],
                bias_hidden=[4], stfam_hidden=[4], vocab=dict(TINY_VOCAB), l_max=3)
    base.update(kw)
    return models.ModelConfig(**base)


def random_batch(cfg: models.ModelConfig, n: int, seed: int) -> models.Batch:
    rng = np.random.default_rng(seed)
    L = cfg.l_max
    lengths = rng.integers(0, L + 1, size=n)
    lengths[0] = L  # at least one full row
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    ctx = np.stack([rng.integers(0, cfg.context_vocab(f), size=n) for f in CONTEXT_FEATURES], 1)
    seq_ctx = np.stack([rng.integers(0, cfg.context_vocab(f), size=(n, L))
                        for f in models.SEQUENCE_FEATURES], 2)
    return models.Batch(
        user=rng.integers(0, cfg.vocab["user"], size=n),
        item=rng.integers(0, cfg.vocab["item"], size=n),
        ctx=ctx,
        seq_item=(rng.integers(1, cfg.vocab["seq_item"], size=(n, L)) * mask).astype(np.int64),
        seq_bucket=(rng.integers(0, len(cfg.time_boundaries) + 1, size=(n, L)) * mask).astype(np.int64),
        seq_ctx=(seq_ctx * mask[:, :, None]).astype(np.int64),
        mask=mask,
        label=rng.integers(0, 2, size=n).astype(np.float64),
        group=rng.integers(0, 3, size=n).astype(np.uint64),
    )


def random_params(cfg: models.ModelConfig, seed: int, scale: float = 0.5) -> dict:
    """Normal draws with a spread large enough to exercise every path but short of saturating
    the attention softmax, where gradients shrink below finite-difference resolution."""
    params = models.init_params(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    return {name: rng.normal(scale=scale * (0.5 if name.endswith("/b") else 1.0), size=v.shape)
            for name, v in params.items()}


def gradient_errors(cfg, params, batch, step=1e-5) -> dict:
    """Norm-wise relative error between backprop and central differences, per parameter."""
    from dcam.training import ce_loss

    def loss_of(p):
        return float(ce_loss(models.forward(batch, p, cfg), batch.label).data)

    g = T.Graph()
    loss = ce_loss(models.forward(batch, g.register(params), cfg), batch.label)
    analytic = T.backward(g, loss)
    errors = {}
    for name, value in params.items():
        numeric = T.finite_difference_gradient(lambda v: loss_of({**params, name: v}), value, step)
        errors[name] = T.relative_error(analytic[name], numeric)
    return errors


# acceptance criterion outcomes, printed in the terminal summary by conftest.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class criterion:
    """Context manager recording whether the block for acceptance criterion ``number`` passed."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = "; ".join(self.details)
        ACCEPTANCE[self.number] = (exc_type is None, f"{self.title}" + (f" ({detail})" if detail else ""))
        return False
