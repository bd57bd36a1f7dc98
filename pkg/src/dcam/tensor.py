"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` owns a parameter registry and a tape of recorded operations.
Every op below accepts :class:`Tensor` objects or anything ``np.asarray``
understands; inputs that do not descend from a registered parameter are
treated as constants and nothing is recorded for them, so the same model code
serves both training (with a graph) and inference (plain arrays).
"""
from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")


class Tensor:
    """An n-dimensional float64 array, optionally attached to a graph."""

    __slots__ = ("data", "graph", "requires_grad", "name")

    def __init__(self, data, graph: "Graph | None" = None, requires_grad: bool = False,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Graph:
    """Parameter registry plus the list of operations recorded since creation."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.tape: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def parameter(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(value, graph=self, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def register(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.parameter(name, value) for name, value in params.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    graph = None
    for p in parents:
        if p.requires_grad:
            graph = p.graph
            break
    if graph is None:
        return Tensor(data)
    out = Tensor(data, graph=graph, requires_grad=True)
    graph.tape.append((out, tuple(parents), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ga_needed, gb_needed = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if ga_needed else None,
                _unbroadcast(g * ad, bd.shape) if gb_needed else None)

    return _record(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    ga_needed, gb_needed = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if ga_needed else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if gb_needed else None
        return ga, gb

    return _record(np.matmul(ad, bd), (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _record(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _record(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def activate(x, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    if activation == "tanh":
        return tanh(x)
    if activation == "none":
        return as_tensor(x)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError(f"softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    widths = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(widths)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(x, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _record(x.data[key], (x,), backward)


def take_rows(table, index) -> Tensor:
    """Embedding lookup: ``table[index]`` with a scatter-add backward."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    vocab, dim = table.shape
    if index.size and (index.min() < 0 or index.max() >= vocab):
        raise IndexError(f"lookup index out of range for table of {vocab} rows")

    def backward(g):
        flat = index.reshape(-1)
        g2 = g.reshape(-1, dim)
        out = np.empty((vocab, dim))
        for j in range(dim):
            out[:, j] = np.bincount(flat, weights=g2[:, j], minlength=vocab)
        return (out,)

    return _record(table.data[index], (table,), backward)


def dense_forward(x, W, bias, activation: str = "none") -> Tensor:
    """``activation(x @ W + bias)`` for ``x: [B, m]``, ``W: [m, n]``, ``bias: [n]``."""
    x, W, bias = as_tensor(x), as_tensor(W), as_tensor(bias)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    if W.ndim != 2 or x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"dense shape mismatch: x {x.shape} vs W {W.shape}")
    if bias.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: bias {bias.shape} vs W {W.shape}")
    return activate(matmul(x, W) + bias, activation)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy evaluated directly from logits."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    zd = z.data
    per = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size
    p = _sigmoid(zd)
    return _record(np.asarray(per.mean()), (z,), lambda g: (g * (p - y) / n,))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every registered parameter.

    The tape is left intact, so calling this twice yields identical results.
    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(graph.tape):
        g = grads.get(id(out))
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
        for name, t in graph.params.items()
    }


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(x))
        flat[i] = orig - step
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            warnings.warn(f"non-finite function value near coordinate {i}", RuntimeWarning,
                          stacklevel=2)
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    diff = np.linalg.norm(np.asarray(a) - np.asarray(b))
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(diff / scale)
