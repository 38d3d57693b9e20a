"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity is a :class:`Node`. Operations build a DAG whose
nodes carry a local backward rule; :func:`backward` walks it once in reverse
topological order and accumulates (sums) gradients into every node that
requires them.

Graph construction is skipped when no input requires a gradient, or inside a
:func:`no_grad` block, so target-network evaluation costs plain numpy time.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")
    # make `ndarray op Node` dispatch to the Node's reflected operator
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn: Callable | None = None,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        # leaves are zero-initialized; interior nodes allocate lazily
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _make(value: np.ndarray, parents: tuple, backward_fn: Callable) -> Node:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Node(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every upstream node.

    ``root`` must hold a single element. Gradients add onto whatever the
    leaves already hold; call ``zero_grad`` between steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    seed = np.ones_like(root.value)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def back(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), back)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def abs_(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


def elu(a) -> Node:
    a = as_node(a)
    av = a.value
    pos = av > 0
    expm = np.exp(np.minimum(av, 0.0))
    out = np.where(pos, av, expm - 1.0)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, expm),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def minimum(a, b) -> Node:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_node(a), as_node(b)
    take_a = a.value <= b.value
    return _make(
        np.where(take_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.value.shape), _unbroadcast(g * ~take_a, b.value.shape)),
    )


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a) -> Node:
    """Same value, no upstream gradient."""
    return Node(as_node(a).value)


# --- reductions and shape ---------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Node:
    a = as_node(a)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def index(a, idx) -> Node:
    a = as_node(a)
    shape = a.value.shape

    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx)
    )

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), back)


# --- fused composites -------------------------------------------------------

def layer_norm(a, eps: float = 1e-5) -> Node:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_node(a)
    av = a.value
    mu = av.mean(axis=-1, keepdims=True)
    centered = av - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    n = av.shape[-1]

    def back(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gsum - xhat * gx),)

    return _make(xhat, (a,), back)


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _make(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def grad_norm(nodes: Iterable[Node]) -> float:
    total = 0.0
    for node in nodes:
        if node.grad is not None:
            total += float(np.sum(node.grad * node.grad))
    return float(np.sqrt(total))
