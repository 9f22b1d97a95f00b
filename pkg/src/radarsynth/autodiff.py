"""Reverse-mode differentiation over numpy arrays.

A :class:`Tensor` records its parents and a closure mapping the output
gradient to one gradient per parent.  :func:`backward` walks the graph once
in reverse topological order.  Only nodes that (transitively) depend on a
``requires_grad`` leaf keep closures.
"""

from __future__ import annotations

import numpy as np


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name",
                 "_consumed")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False,
                 name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.value, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def Parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that builds no graph (inference only)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def make(value, parents, backward_fn, op) -> Tensor:
    """Build an op node; the closure is dropped when no parent needs gradients."""
    needs = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    return Tensor(value, parents if needs else (), backward_fn if needs else None, op, needs)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward already ran on this graph; rebuild it first")
    root._consumed = True
    if not root.requires_grad:
        return
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.dtype != p.value.dtype:
                pg = pg.astype(p.value.dtype)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        # free closures so the graph cannot be replayed
        node.backward_fn = None
        node.parents = ()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return make(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.value)
    return make(np.abs(x.value), (x,), lambda g: (g * s,), "abs")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.value > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make(x.value * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    v = x.value
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    e = np.exp(-np.abs(v))
    sig = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make(out.astype(v.dtype), (x,), lambda g: (g * sig,), "softplus")


def minimum(x: Tensor, c: float) -> Tensor:
    keep = x.value < c
    return make(np.minimum(x.value, c), (x,), lambda g: (g * keep,), "minimum")


def square(x: Tensor) -> Tensor:
    v = x.value
    return make(v * v, (x,), lambda g: (2 * g * v,), "square")


# ---------------------------------------------------------------------------
# reductions (accumulated in float64)


def total(x: Tensor) -> Tensor:
    out = np.asarray(x.value.sum(dtype=np.float64))
    return make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    out = np.asarray(x.value.mean(dtype=np.float64))
    return make(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean")


def stack_sum(terms) -> Tensor:
    """Sum of scalar tensors in list order."""
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    return make(value, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def gather_rows(x: Tensor, idx: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Rows ``x[idx]``; rows where ``valid`` is False are zero."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.value[idx]
    if valid is not None:
        out = out * valid[:, None].astype(x.dtype)

    def back(g):
        gx = np.zeros_like(x.value)
        gg = g if valid is None else g * valid[:, None]
        np.add.at(gx, idx, gg)
        return (gx,)

    return make(out, (x,), back, "gather_rows")


def numerical_grad(f, x: np.ndarray, eps: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place)."""
    flat = x.reshape(-1)
    picks = range(flat.size) if index is None else index
    out = np.zeros(len(picks) if index is not None else flat.size)
    for j, i in enumerate(picks):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * eps)
    return out
