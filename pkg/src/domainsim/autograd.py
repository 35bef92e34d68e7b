"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record backward rules on a thread-local tape as they run
(define-by-run).  ``backward`` walks the tape in reverse from a scalar
root, accumulates gradients into every ``requires_grad`` tensor reachable
from it, and clears the tape.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of forward operations; inputs always precede use."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule) -> None:
        self.nodes.append(_Node(out, inputs, rule))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tls = threading.local()


def tape() -> Tape:
    """The current thread's tape."""
    t = getattr(_tls, "tape", None)
    if t is None:
        t = Tape()
        _tls.tape = t
    return t


def _recording() -> bool:
    return not getattr(_tls, "no_grad", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (inference, finite-difference evaluations)."""
    prev = getattr(_tls, "no_grad", False)
    _tls.no_grad = True
    try:
        yield
    finally:
        _tls.no_grad = prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if _recording():
        tape().record(out, inputs, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values)

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(out, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.values * s)

    def rule(g):
        return (g * s,)

    return _record(out, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dimensions follow numpy semantics."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)

    def rule(g):
        da = _unbroadcast(g @ b.values.swapaxes(-1, -2), a.shape)
        db = _unbroadcast(a.values.swapaxes(-1, -2) @ g, b.shape)
        return da, db

    return _record(out, (a, b), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.values.reshape(shape))

    def rule(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), rule)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.values.transpose(axes))
    inverse = np.argsort(axes)

    def rule(g):
        return (g.transpose(inverse),)

    return _record(out, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())

    def rule(g):
        return (np.full(a.shape, float(g)),)

    return _record(out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), rule)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.values
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * x2 * x))
    out = Tensor(0.5 * x * (1.0 + t))

    def rule(g):
        sech2 = 1.0 - t * t
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner),)

    return _record(out, (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-normalized exponentials along ``axis``, max-subtracted for stability."""
    x = a.values
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match feature dim {d}"
        )
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(gain.values * xhat + bias.values)

    def rule(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.values
        # classic layer-norm backward over the last axis
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape produce ``ids.shape + (dim,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = Tensor(table.values[ids])

    def rule(g):
        dtable = np.zeros_like(table.values)
        np.add.at(dtable, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dtable,)

    return _record(out, (table,), rule)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a rank-2 tensor; backward scatter-adds."""
    if a.values.ndim != 2:
        raise ValueError("take_rows expects a rank-2 tensor")
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor(a.values[rows])

    def rule(g):
        da = np.zeros_like(a.values)
        np.add.at(da, rows, g)
        return (da,)

    return _record(out, (a,), rule)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.values * keep)

    def rule(g):
        return (g * keep,)

    return _record(out, (a,), rule)


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log softmax probability of the true class.

    ``logits`` is ``[batch, classes]``; backward yields
    ``(softmax - onehot) / batch``.
    """
    if logits.values.ndim != 2:
        raise ValueError("cross_entropy_loss expects [batch, classes] logits")
    n, c = logits.shape
    if n < 1:
        raise ValueError("batch must be non-empty")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")

    x = logits.values
    shifted = x - x.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    loss = -logprobs[np.arange(n), labels].mean()
    out = Tensor(loss)
    probs = np.exp(logprobs)

    def rule(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (float(g) * d / n,)

    return _record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``root``.

    The root must be a scalar produced on the current tape.  Gradients
    accumulate (+=) across shared uses; the tape is cleared afterward.
    """
    t = tape()
    try:
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if not any(node.out is root for node in t.nodes):
            raise ValueError("backward root is not an output on the current tape")

        def _deposit(tensor: Tensor, g: np.ndarray) -> None:
            if tensor.grad is None:
                tensor.grad = g.copy()
            else:
                tensor.grad = tensor.grad + g

        # Reverse topological walk: every consumer of a tensor is visited
        # before its producer, so the pop below sees the full gradient.
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
        holders: dict[int, Tensor] = {id(root): root}
        for node in reversed(t.nodes):
            g = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                _deposit(node.out, g)
            for inp, contrib in zip(node.inputs, node.rule(g)):
                if contrib is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                    holders[key] = inp

        # Entries still present never appeared as an output: graph leaves.
        for key, g in grads.items():
            leaf = holders[key]
            if leaf.requires_grad:
                _deposit(leaf, g)
    finally:
        t.clear()


@dataclass
class GradCheckReport:
    """Per-parameter and aggregate relative errors of analytic vs numeric grads."""

    per_param: dict[str, tuple[float, float, int]]
    max_rel_error: float
    mean_rel_error: float


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-3,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be deterministic (checked by double evaluation) and return a
    scalar Tensor of the current ``params``.  When ``max_coords_per_param``
    is set, each parameter is probed on a deterministic subset of
    coordinates: the largest analytic-gradient entries plus a seeded uniform
    sample, instead of every coordinate.
    """
    out1 = f()
    val1 = out1.item()
    for p in params.values():
        p.zero_grad()
    backward(out1)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for name, p in params.items()}

    with no_grad():
        val2 = f().item()
    if val1 != val2:
        raise ValueError(
            f"function is not deterministic: {val1!r} != {val2!r} on double evaluation"
        )

    rng = np.random.default_rng(seed)
    per_param: dict[str, tuple[float, float, int]] = {}
    all_errors: list[float] = []
    for name, p in params.items():
        flat = p.values.reshape(-1)
        a = analytic[name].reshape(-1)
        n_coords = flat.size
        if max_coords_per_param is not None and n_coords > max_coords_per_param:
            k_top = max_coords_per_param // 2
            top = np.argsort(-np.abs(a))[:k_top]
            rand = rng.choice(n_coords, size=max_coords_per_param - k_top, replace=False)
            coords = np.unique(np.concatenate([top, rand]))
        else:
            coords = np.arange(n_coords)

        errors = []
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            with no_grad():
                plus = f().item()
            flat[idx] = orig - h
            with no_grad():
                minus = f().item()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(a[idx]), abs(numeric), 1e-8)
            errors.append(abs(a[idx] - numeric) / denom)
        errors_arr = np.asarray(errors)
        per_param[name] = (float(errors_arr.max()), float(errors_arr.mean()), len(errors))
        all_errors.extend(errors)

    all_arr = np.asarray(all_errors)
    return GradCheckReport(
        per_param=per_param,
        max_rel_error=float(all_arr.max()),
        mean_rel_error=float(all_arr.mean()),
    )
