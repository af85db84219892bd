"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by small MLPs, the 2-D VAE and
input-gradient attacks are provided. Broadcasting is limited to adding a
row vector to every row of a matrix (bias-add) and to scalars.
"""
from __future__ import annotations

import numpy as np

from mcadv.errors import ContractError, DimensionError, NonFiniteError

PROB_FLOOR = 1e-12


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim and 0 in arr.shape:
        return arr
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate into it.

    ``requires_grad`` marks leaves whose gradient the caller wants. Results of
    operations track their parents only when at least one input requires a
    gradient, so pure inference builds no graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # row vector added to each row of a matrix
    return g.sum(axis=0).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise DimensionError(f"{op} shape mismatch: {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped below at ``PROB_FLOOR``."""
    x = np.maximum(a.data, PROB_FLOOR)
    live = a.data >= PROB_FLOOR
    return _make(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(a.data.sum() / n, (a,), lambda g: (np.full(shape, g / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor, giving one value per row."""
    cols = a.shape[-1]
    return _make(a.data.sum(axis=-1), (a,), lambda g: (np.repeat(g[..., None], cols, axis=-1),))


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat each row of a 2-D tensor ``times`` times consecutively."""
    n = a.shape[0]
    out = np.repeat(a.data, times, axis=0)
    return _make(out, (a,), lambda g: (g.reshape(n, times, -1).sum(axis=1),))


def _softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    p = _softmax_array(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward)


def _check_labels(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range for {classes} classes: {labels}")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, label) -> Tensor:
    """-log(probs[label]) for one distribution, probability floored at 1e-12."""
    if probs.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a 1-D distribution, got {probs.shape}")
    label = int(_check_labels([label], probs.shape[0])[0])
    onehot = np.zeros(probs.shape)
    onehot[label] = 1.0
    return neg(tensor_sum(mul(log(probs), onehot)))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + cross-entropy over rows of ``logits``.

    The gradient with respect to the logits is ``softmax - onehot`` per row
    (divided by the row count when ``reduction == "mean"``).
    """
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    n, c = z.shape
    labels = _check_labels(labels, c).reshape(n)
    p = _softmax_array(z)
    picked = np.maximum(p[np.arange(n), labels], PROB_FLOOR)
    losses = -np.log(picked)
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = losses.sum() * scale

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g * scale * d).reshape(logits.shape),)

    return _make(value, (logits,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Summed Bernoulli negative log-likelihood of ``target`` under sigmoid(logits)."""
    z = logits.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"bce shape mismatch: {z.shape} and {t.shape}")
    # log(1 + e^-|z|) + max(z, 0) - z t
    value = (np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - z * t).sum()
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _make(value, (logits,), lambda g: (g * (s - t),))


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``; returns every reachable node's gradient.

    Gradients accumulate into ``.grad``; call :func:`zero_grad` on the leaves
    before reusing a graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node.grad is not None and not np.isfinite(node.grad).all():
            raise NonFiniteError("non-finite gradient during backward")
    return {node: node.grad for node in order}


def zero_grad(*tensors: Tensor) -> None:
    for t in tensors:
        t.zero_grad()
