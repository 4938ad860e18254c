"""Tape-based reverse-mode differentiation over numpy arrays.

Every operation appends one node to a :class:`Tape`.  A node stores the ids of
its parents and a vector-Jacobian product closure; since nodes are only ever
appended, the node list is already in topological order and :func:`backward`
is a single reverse sweep.

A tape created with ``record=False`` runs the same operations without storing
anything, which is how models are evaluated when no gradient is needed.

All arithmetic is float64.  Non-finite intermediates are treated as errors and
raise :class:`NonFiniteError` with the id of the offending node.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "DomainError",
    "NonFiniteError",
    "apply",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "celu",
    "square",
    "relu",
    "maximum",
    "sum",
    "mean",
    "matmul",
    "take",
    "concat",
    "logsumexp",
    "elementwise",
    "detach",
    "backward",
    "per_sample_gradients",
]


class NonFiniteError(ArithmeticError):
    """A forward value became NaN or infinite."""

    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"{message} (node {node_id})")
        self.node_id = node_id


class DomainError(NonFiniteError):
    """An operation was applied outside its domain (log of x <= 0, x / 0)."""


class _Node:
    __slots__ = ("kind", "parents", "vjp")

    def __init__(self, kind, parents, vjp):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only list of nodes.

    Rebuild one per training step; gradients are only defined for Values
    created on the same tape.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, data, parents, vjp):
        # parents: tuple of Values; constant parents (id < 0) receive nothing
        data = np.asarray(data)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite result from {kind}", len(self.nodes))
        if not self.record:
            return Value(self, -1, data)
        pids = tuple(p.id for p in parents)
        if vjp is not None and all(i < 0 for i in pids):
            vjp = None
        self.nodes.append(_Node(kind, pids, vjp))
        return Value(self, len(self.nodes) - 1, data)

    def leaf(self, data) -> Value:
        """A differentiable input (model parameter or input of interest)."""
        data = np.array(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError("non-finite leaf", len(self.nodes))
        if not self.record:
            return Value(self, -1, data)
        self.nodes.append(_Node("leaf", (), None))
        return Value(self, len(self.nodes) - 1, data)

    def leaves(self, arrays: Sequence[np.ndarray]) -> list[Value]:
        return [self.leaf(a) for a in arrays]

    def constant(self, data) -> Value:
        """A value that never receives a gradient; it adds no node."""
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError("non-finite constant", len(self.nodes))
        return Value(self, -1, data)


class Value:
    __slots__ = ("tape", "id", "data")
    # make ndarray <op> Value defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, node_id: int, data: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self):
        return self.id >= 0

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(id={self.id}, shape={self.data.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape, v):
    if isinstance(v, Value):
        if v.tape is not tape:
            raise ValueError("Values belong to different tapes")
        return v
    return tape.constant(v)


def _pair(a, b):
    if isinstance(a, Value):
        tape = a.tape
    elif isinstance(b, Value):
        tape = b.tape
    else:
        raise TypeError("at least one operand must be a Value")
    return _lift(tape, a), _lift(tape, b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- binary ----------------------------------------------------------------


def add(a, b) -> Value:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Value:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Value:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return a.tape._push(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Value:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero", len(a.tape.nodes))
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return a.tape._push("div", out, (a, b), vjp)


def maximum(a, b) -> Value:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick = ad >= bd
    return a.tape._push(
        "max", np.where(pick, ad, bd), (a, b),
        lambda g: (_unbroadcast(g * pick, ad.shape), _unbroadcast(g * ~pick, bd.shape)),
    )


def matmul(a, b) -> Value:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return a.tape._push("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- unary -----------------------------------------------------------------


def neg(a: Value) -> Value:
    return a.tape._push("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Value) -> Value:
    # overflow is reported as NonFiniteError by _push
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return a.tape._push("exp", out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of non-positive value", len(a.tape.nodes))
    return a.tape._push("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return a.tape._push("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def celu(a: Value, alpha: float = 1.0) -> Value:
    """x for x >= 0, alpha * (exp(x / alpha) - 1) otherwise."""
    ad = a.data
    negative = ad < 0
    e = np.exp(ad[negative] / alpha)
    out = ad.copy()
    out[negative] = alpha * (e - 1.0)
    slope = np.ones_like(ad)
    slope[negative] = e
    return a.tape._push("celu", out, (a,), lambda g: (g * slope,))


def square(a: Value) -> Value:
    ad = a.data
    return a.tape._push("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Value) -> Value:
    """Positive part; the gradient mask is ``a > 0``."""
    ad = a.data
    mask = ad > 0
    return a.tape._push("relu", np.where(mask, ad, 0.0), (a,), lambda g: (g * mask,))


def elementwise(a: Value, f: Callable, df: Callable, kind: str = "elementwise") -> Value:
    """Apply a user-supplied elementwise function with its derivative."""
    ad = a.data
    slope = df(ad)
    return a.tape._push(kind, f(ad), (a,), lambda g: (g * slope,))


# -- reductions and reshaping ----------------------------------------------


def sum(a: Value, axis=None) -> Value:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return a.tape._push("sum", np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return a.tape._push("sum", np.sum(a.data, axis=axis), (a,), vjp)


def mean(a: Value, axis=None) -> Value:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def logsumexp(a: Value, axis=None) -> Value:
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    s = np.sum(np.exp(ad - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = np.exp(ad - out_k)
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (g * soft,)

    return a.tape._push("logsumexp", out, (a,), vjp)


def take(a: Value, idx, axis: int = 0) -> Value:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    where = (slice(None),) * axis + (idx,)
    distinct = np.unique(idx).size == idx.size

    def vjp(g):
        full = np.zeros(shape)
        if distinct:
            full[where] = g
        else:
            np.add.at(full, where, g)
        return (full,)

    return a.tape._push("take", np.take(a.data, idx, axis=axis), (a,), vjp)


def concat(values: Sequence, axis: int = 0) -> Value:
    tape = next(v.tape for v in values if isinstance(v, Value))
    vs = [_lift(tape, v) for v in values]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    return tape._push(
        "concat", np.concatenate([v.data for v in vs], axis=axis), tuple(vs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def detach(a: Value) -> Value:
    """Same data, treated as a constant by :func:`backward`."""
    if not a.tape.record:
        return Value(a.tape, -1, a.data)
    # kept on the tape with its parent recorded, but with no partials
    a.tape.nodes.append(_Node("detach", (a.id,), None))
    return Value(a.tape, len(a.tape.nodes) - 1, a.data)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp,
    "log": log, "tanh": tanh, "celu": celu, "square": square, "sum": sum,
    "mean": mean, "max": maximum, "relu": relu, "relu-mask": relu,
    "matmul": matmul, "logsumexp": logsumexp, "detach": detach,
}


def apply(kind: str, *inputs, **kwargs) -> Value:
    """Dispatch an operation by name, e.g. ``apply("celu", v, alpha=1.0)``."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return op(*inputs, **kwargs)


# -- reverse sweep ---------------------------------------------------------


def _sweep(tape: Tape, root_id: int, seed: np.ndarray) -> list:
    grads: list = [None] * (root_id + 1)
    grads[root_id] = seed
    nodes = tape.nodes
    for i in range(root_id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid < 0:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    return grads


def _collect(grads, params):
    out = []
    for p in params:
        g = grads[p.id] if 0 <= p.id < len(grads) else None
        out.append(np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64))
    return out


def backward(root: Value, params: Sequence[Value]) -> list[np.ndarray]:
    """Gradient of a scalar ``root`` with respect to each of ``params``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.tape.record:
        raise ValueError("tape was created with record=False")
    if root.id < 0:
        return [np.zeros_like(p.data) for p in params]
    grads = _sweep(root.tape, root.id, np.ones_like(root.data))
    return _collect(grads, params)


def per_sample_gradients(roots, params: Sequence[Value]) -> list[list[np.ndarray]]:
    """One independent reverse sweep per root.

    ``roots`` is either a sequence of scalar Values or a single 1-D Value whose
    entries are treated as separate roots.  Cost is O(n * |tape|).
    """
    out = []
    if isinstance(roots, Value):
        if roots.data.ndim != 1:
            raise ValueError("vector root must be 1-D")
        for i in range(roots.data.shape[0]):
            seed = np.zeros_like(roots.data)
            seed[i] = 1.0
            if roots.id < 0:
                out.append([np.zeros_like(p.data) for p in params])
            else:
                out.append(_collect(_sweep(roots.tape, roots.id, seed), params))
        return out
    return [backward(r, params) for r in roots]
