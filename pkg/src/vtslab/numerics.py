"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the token sampler and the grounding head are
provided.  Every op returns a new :class:`Node`; calling :func:`backward` on a
scalar (or on several outputs with explicit upstream gradients) accumulates
``.grad`` on every node that requires it.

Arrays carry an arbitrary number of leading batch axes.  Binary elementwise
ops follow numpy broadcasting and reduce gradients back to operand shapes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import zlib

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionError,
    EmptyInputError,
    InvalidHyperparameterError,
    NonFiniteError,
    OracleFailureError,
    UsageError,
)

GUMBEL_EPS = 1e-12
# slope of the logistic gate in the MLP nonlinearity x * sigmoid(1.702 x)
GATE_SLOPE = 1.702


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value) -> Node:
    """Leaf that accumulates a gradient."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value

    def bw(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Node(out, (a, b), bw, "div")


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return Node(x.value * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Node:
    x = as_node(x)
    if np.any(x.value <= 0):
        raise NonFiniteError("log of a non-positive value")
    return Node(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def sigmoid(x) -> Node:
    x = as_node(x)
    out = expit(x.value)
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x) -> Node:
    """Logistic-gated identity ``x * sigmoid(1.702 x)``; the MLP nonlinearity."""
    x = as_node(x)
    s = expit(GATE_SLOPE * x.value)
    out = x.value * s

    def bw(g):
        return (g * (s + GATE_SLOPE * x.value * s * (1.0 - s)),)

    return Node(out, (x,), bw, "gelu")


def absolute(x) -> Node:
    x = as_node(x)
    return Node(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def minimum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "minimum")
    take_a = a.value <= b.value

    def bw(g):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return Node(np.minimum(a.value, b.value), (a, b), bw, "minimum")


def stopgrad(x) -> Node:
    """Same value, no gradient path to ``x``."""
    x = as_node(x)
    return Node(x.value, (), None, "stopgrad", requires_grad=False)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Node(out, (x,), bw, "sum")


def mean(x, axis, keepdims=False) -> Node:
    x = as_node(x)
    n = x.shape[axis]
    if n == 0:
        raise EmptyInputError(f"mean over an empty axis of shape {x.shape}")
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool_rows(x) -> Node:
    """Mean over the row axis (second to last) of ``(..., n, d)``."""
    x = as_node(x)
    if x.value.ndim < 2:
        raise DimensionError(f"mean_pool_rows expects (..., n, d), got {x.shape}")
    if x.shape[-2] == 0:
        raise EmptyInputError("mean_pool_rows over zero rows")
    return mean(x, axis=-2)


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence, axis=-1) -> Node:
    xs = [as_node(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return Node(out, xs, bw, "concat")


def gather(x, index, axis) -> Node:
    """``np.take_along_axis``; backward scatters (adds) into the source."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take_along_axis(x.value, index, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.value)
        # scatter-add so repeated indices accumulate
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis % g.ndim] = np.broadcast_to(index, g.shape)
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return Node(out, (x,), bw, "gather")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        out = a.value @ b.value
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch extents, {a.shape} x {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- softmax family

def _check_temperature(temperature):
    if not temperature > 0:
        raise InvalidHyperparameterError(f"temperature must be > 0, got {temperature}")


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Node:
    x = as_node(x)
    _check_temperature(temperature)
    if x.shape[axis] == 0:
        raise EmptyInputError("softmax over an empty axis")
    z = x.value / temperature
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return Node(out, (x,), bw, "softmax")


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Node:
    x = as_node(x)
    _check_temperature(temperature)
    if x.shape[axis] == 0:
        raise EmptyInputError("log_softmax over an empty axis")
    z = x.value / temperature
    shifted = z - z.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Node(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- backward

def _topo_order(roots: Iterable[Node]) -> list[Node]:
    order, seen = [], set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
    return order


def backward(outputs, grads=None) -> None:
    """Accumulate gradients of ``sum_k <grads[k], outputs[k]>`` into the graph.

    With a single scalar output and no ``grads`` the seed is 1.
    """
    if isinstance(outputs, Node):
        outputs = [outputs]
        grads = None if grads is None else [grads]
    outputs = list(outputs)
    if grads is None:
        if len(outputs) != 1 or outputs[0].value.size != 1:
            raise UsageError("backward without seed gradients needs a single scalar output")
        grads = [np.ones_like(outputs[0].value)]
    pending = {}
    for out, g in zip(outputs, grads, strict=True):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != out.shape:
            raise DimensionError(f"seed gradient shape {g.shape} != output shape {out.shape}")
        pending[id(out)] = pending.get(id(out), 0.0) + g

    for node in reversed(_topo_order(o for o in outputs if o.requires_grad)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.requires_grad:
                pending[id(parent)] = pending[id(parent)] + pg if id(parent) in pending else pg


# ---------------------------------------------------------------- oracle

def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise InvalidHyperparameterError(f"step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"non-finite function value probing coordinate {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """Max elementwise |a-b| / max(1, |a|, |b|)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


# ---------------------------------------------------------------- randomness

@dataclass
class RngState:
    """Counter-based random source.

    Each draw builds a fresh PCG64 stream from ``(seed, counter)`` and then
    bumps the counter, so equal states always produce equal samples.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        mask = (1 << 64) - 1
        ss = np.random.SeedSequence([self.seed & mask, self.counter & mask])
        self.counter += 1
        return np.random.Generator(np.random.PCG64(ss))

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def normal(self, shape=()) -> np.ndarray:
        return self._generator().standard_normal(size=shape)

    def integers(self, low, high=None, shape=None):
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n) -> np.ndarray:
        return self._generator().permutation(n)

    def gumbel(self, shape) -> np.ndarray:
        u = np.clip(self.uniform(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
        return -np.log(-np.log(u))

    def child(self, tag) -> "RngState":
        """Independent state derived from this one without advancing it; ``tag`` is an int or str."""
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode("utf-8"))
        entropy = [self.seed & ((1 << 64) - 1), self.counter, int(tag) & ((1 << 64) - 1)]
        return RngState(int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]))


def glorot(rng: RngState, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape or (fan_in, fan_out), -a, a)
