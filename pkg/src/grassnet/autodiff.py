"""Tape-based reverse-mode differentiation over float64 numpy arrays, the Adam
optimizer, a finite-difference gradient checker and the checkpoint format.

Forward ops always compute.  They are recorded only while a :class:`Tape` is
active on the current thread and at least one input requires gradients;
nodes are appended in creation order, so walking the tape backwards is a
valid reverse topological order.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_local = threading.local()


def _current_tape() -> "Tape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records differentiable ops inside a ``with`` block.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.gradient(loss, [w])[0]
    array([2., 4.])
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def reset(self) -> None:
        self.nodes.clear()

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each source (zeros if unreachable)."""
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        sources = list(sources)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: set[int] = set()
        for out, parents, backward in reversed(self.nodes):
            key = id(out)
            assert key not in seen, "tape node visited twice"
            seen.add(key)
            g = grads.pop(key, None)
            if g is None:
                continue
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return [
            np.asarray(grads.get(id(s), np.zeros_like(s.data)), dtype=np.float64).reshape(s.shape)
            for s in sources
        ]


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap ``data`` as an op output; extension point for fused custom ops."""
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, tuple(parents), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return record(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * out / b.data, b.shape),
    ))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def div_scalar(a: Tensor, c) -> Tensor:
    """``a / c`` for a python float or a single-element tensor ``c``."""
    if isinstance(c, Tensor):
        if c.data.size != 1:
            raise ShapeError(f"div_scalar: divisor must have one element, got {c.shape}")
        return div(a, reshape(c, ()))
    return record(a.data / c, (a,), lambda g: (g / c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def _softplus(x: np.ndarray) -> np.ndarray:
    big = x > 20.0
    safe = np.where(big, 0.0, x)
    return np.where(big, x + np.log1p(np.exp(-np.where(big, x, 0.0))), np.log1p(np.exp(safe)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    """``ln(1 + e^x)``, switching to ``x + ln(1 + e^-x)`` above 20."""
    return record(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(out, (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scalar_mul(sum_(a, axis), 1.0 / count)


def max_abs(a: Tensor) -> Tensor:
    """Largest absolute entry; the gradient goes to the first maximiser."""
    flat = a.data.reshape(-1)
    if flat.size == 0:
        raise ShapeError("max_abs of an empty tensor")
    idx = int(np.argmax(np.abs(flat)))
    sign = 1.0 if flat[idx] >= 0 else -1.0

    def back(g):
        out = np.zeros(flat.size)
        out[idx] = sign * float(g)
        return (out.reshape(a.shape),)

    return record(np.abs(flat[idx]), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {widths}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([p.data for p in parts], axis=0), parts, back)


def reverse_rows(a: Tensor) -> Tensor:
    return record(a.data[::-1].copy(), (a,), lambda g: (g[::-1].copy(),))


def index_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record(a.data[idx], (a,), back)


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(out, (a,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[y]`` over rows, max-shifted for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross_entropy over an empty label set")
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but labels shape {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return record(np.array(loss), (logits,), back)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


@dataclass
class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments."""

    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        for name, t in self.params.items():
            t.requires_grad = True
            t.name = name
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))

    def names(self) -> list[str]:
        return sorted(self.params)

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in self.names()]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def gradients(self, loss_fn: Callable[[], Tensor]) -> tuple[float, dict[str, np.ndarray]]:
        with Tape() as tape:
            loss = loss_fn()
        grads = tape.gradient(loss, self.tensors())
        return float(loss.data), dict(zip(self.names(), grads))


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """One Adam update with bias correction.

    Weight decay is coupled L2: ``g + weight_decay * theta`` enters the
    moment estimates.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        p = store.params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def finite_diff_check(f: Callable[[ParamStore], Tensor], store: ParamStore,
                      h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    _, analytic = store.gradients(lambda: f(store))
    worst = 0.0
    for name in store.names():
        p = store.params[name]
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(store).data)
            flat[i] = orig - h
            down = float(f(store).data)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst


def save_checkpoint(store: ParamStore, directory: str | os.PathLike) -> None:
    """``index.json`` (name -> shape/offset/length) plus a little-endian f64 blob."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for name in store.names():
        # asarray keeps 0-d shapes (ascontiguousarray would promote them to 1-d)
        arr = np.asarray(store.params[name].data, dtype="<f8")
        raw = arr.tobytes(order="C")
        index[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    (root / "params.bin").write_bytes(b"".join(chunks))
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | os.PathLike) -> ParamStore:
    root = Path(directory)
    index = json.loads((root / "index.json").read_text())
    blob = (root / "params.bin").read_bytes()
    params = {}
    for name, entry in index.items():
        start, length = entry["offset"], entry["length"]
        if start + length > len(blob):
            raise ValueError(f"checkpoint blob truncated at parameter {name}")
        arr = np.frombuffer(blob[start:start + length], dtype="<f8").astype(np.float64)
        params[name] = Tensor(arr.reshape(entry["shape"]))
    return ParamStore(params)
