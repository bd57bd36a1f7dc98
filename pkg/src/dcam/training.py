"""Cross-entropy objective, AdaGrad with linear warm-up, and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import models
from . import tensor as T
from .metrics import EvalReport, evaluate
from .models import Batch, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


def ce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy computed from logits (no probability clamping)."""
    y = np.asarray(labels, dtype=np.float64)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    logits = T.as_tensor(logits)
    if logits.shape != y.shape:
        raise ValueError(f"logits {logits.shape} and labels {y.shape} differ in shape")
    return T.bce_with_logits(logits, y)


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_start: float = 0.001
    lr_end: float = 0.015
    warmup_steps: int = 1000
    total_steps: int = 5000
    seed: int = 0
    eval_every: int = 0
    eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append("batch_size must be positive")
        if not 0 < self.lr_start <= self.lr_end:
            out.append("need 0 < lr_start <= lr_end")
        if self.total_steps < 0 or self.warmup_steps < 0:
            out.append("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            out.append("warmup_steps must not exceed total_steps")
        if self.eval_every < 0:
            out.append("eval_every must be non-negative")
        return out + self.model.problems()

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        model = d.pop("model", {})
        cfg = cls(**d)
        cfg.model = model if isinstance(model, ModelConfig) else ModelConfig.from_dict(model)
        return cfg


def warmup_lr(step: int, lr_start: float = 0.001, lr_end: float = 0.015,
              warmup_steps: int = 1000) -> float:
    """Linear ramp from ``lr_start`` at step 0 to ``lr_end`` at ``warmup_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= warmup_steps:
        return lr_end
    return lr_start + (lr_end - lr_start) * (step / warmup_steps)


@dataclass
class AdaGradState:
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    eps: float = 1e-8


def adagrad_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: AdaGradState, lr: float) -> None:
    """In place: ``acc += g**2``; ``p -= lr * g / (sqrt(acc) + eps)``."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        acc += g * g
        p -= lr * g / (np.sqrt(acc) + state.eps)


def loss_and_grads(params: dict[str, np.ndarray], batch: Batch,
                   cfg: ModelConfig) -> tuple[float, dict[str, np.ndarray]]:
    graph = T.Graph()
    tensors = graph.register(params)
    loss = ce_loss(models.forward(batch, tensors, cfg), batch.label)
    return float(loss.data), T.backward(graph, loss)


def evaluate_model(params, cfg: ModelConfig, data: Batch, k: int = 10) -> EvalReport:
    logits = models.predict_logits(data, params, cfg)
    probs = 1.0 / (1.0 + np.exp(-logits))
    return evaluate(probs, data.label, data.group, k=k)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]
    report: EvalReport | None
    evals: list[tuple[int, EvalReport]] = field(default_factory=list)


def batch_order(n: int, batch_size: int, seed: int):
    """Endless stream of index arrays; each epoch is a fresh ``(seed, 1, epoch)`` permutation."""
    epoch = 0
    while True:
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        if n < batch_size:
            yield perm
        epoch += 1


def train(config: TrainConfig, train_data: Batch, eval_data: Batch | None = None,
          out_dir=None, params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Deterministic mini-batch AdaGrad training.

    Writes ``model.ckpt``, ``history.jsonl`` and (with eval data) ``report.json``
    under ``out_dir`` when given.
    """
    config.validate()
    cfg = config.model
    params = models.init_params(cfg, config.seed) if params is None else params
    state = AdaGradState(eps=config.eps)
    history: list[tuple[int, float, float]] = []
    evals: list[tuple[int, EvalReport]] = []
    batches = batch_order(len(train_data), config.batch_size, config.seed)
    for step in range(config.total_steps):
        batch = train_data.take(next(batches))
        lr = warmup_lr(step, config.lr_start, config.lr_end, config.warmup_steps)
        loss, grads = loss_and_grads(params, batch, cfg)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        adagrad_step(params, grads, state, lr)
        history.append((step, lr, loss))
        if eval_data is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            rep = evaluate_model(params, cfg, eval_data)
            evals.append((step + 1, rep))
            log.info("step %d loss %.5f eval auc %.5f", step + 1, loss, rep.auc)
    report = evaluate_model(params, cfg, eval_data) if eval_data is not None else None
    result = TrainResult(params, history, report, evals)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def write_outputs(result: TrainResult, config: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(out / "model.ckpt", config.model, result.params,
                           extra={"train_config": config.to_dict()})
    write_history(result.history, out / "history.jsonl")
    if result.report is not None:
        (out / "report.json").write_text(result.report.to_json() + "\n", encoding="utf-8")


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for step, lr, loss in history:
            fh.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")


def read_history(path) -> list[tuple[int, float, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["step"], rec["lr"], rec["loss"]))
    return out
