"""Dense tensor with reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to one gradient per parent. :func:`backward` walks
the resulting graph in reverse topological order (the "tape").
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ValidationError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _parents: tuple = (), _backward: BackwardFn | None = None,
                 _op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.parents = _parents
        self.backward_fn = _backward
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float32
    return Tensor(x, dtype=dtype)


_DEBUG = False


def set_debug(enabled: bool) -> None:
    """When on, every op checks its output is finite."""
    global _DEBUG
    _DEBUG = bool(enabled)


def _make(data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    return Tensor(data, _parents=parents, _backward=backward, _op=op)


# --------------------------------------------------------------------------
# tape


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise RuntimeError("cycle in autodiff graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if state.get(id(p)) != 2:
                if state.get(id(p)) == 1:
                    raise RuntimeError("cycle in autodiff graph")
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf that requires grad.

    With ``params`` given, returns their gradients in order; parameters the
    loss does not depend on get zero arrays rather than ``None``.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg
    for node in tape:
        if not node.parents and node.requires_grad:
            g = grads.get(id(node))
            node.grad = g if g is not None else np.zeros_like(node.data)
    if params is None:
        return None
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(g if g is not None else np.zeros_like(p.data))
        p.grad = out[-1]
    return out


def tape_json(loss: Tensor) -> str:
    """Debug dump of the recorded graph."""
    tape = build_tape(loss)
    ids = {id(t): i for i, t in enumerate(tape)}
    recs = [{"id": ids[id(t)], "op": t.op, "name": t.name, "shape": list(t.shape),
             "inputs": [ids[id(p)] for p in t.parents]} for t in tape]
    return json.dumps(recs, indent=1)


# --------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_bias_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ValidationError(f"{op}: shapes {a.shape} and {b.shape} only broadcast as bias")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        other = [n for i, n in enumerate(t.shape) if i != ax]
        first = [n for i, n in enumerate(tensors[0].shape) if i != ax]
        if other != first:
            raise ValidationError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bwd, "concat")


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.data.ndim
    index = [slice(None)] * x.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _make(x.data[index].copy(), (x,), bwd, "slice")


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    # tanh form is exact and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    neg = x.data < 0
    scale = np.where(neg, np.asarray(slope, dtype=x.dtype), np.asarray(1, dtype=x.dtype))
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")
