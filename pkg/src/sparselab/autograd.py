"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a numpy array and optionally records the operation that
produced it. Calling :func:`backward` on a scalar tensor walks the recorded
graph in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad=True``.

Reductions accumulate in float64 and cast back to the storage dtype, so
results are deterministic and do not depend on summation chunking.
"""

from __future__ import annotations

import numpy as np


class AutogradError(ValueError):
    """Raised for misuse of the tape (e.g. backward on a non-scalar)."""


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, np.generic):     # 0-d results of numpy scalar ops
            data = np.asarray(data)
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """A view of the same storage with no history and no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, owned=False):
        # owned=True promises g is freshly allocated and will not be reused
        # by the caller, so the first accumulation can adopt it without copy
        if self.grad is None:
            if owned and isinstance(g, np.ndarray):
                self.grad = g
            else:
                self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph-building operations ------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(g.dtype, copy=False)


def make_node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def add(a, b):
    out_data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return make_node(out_data, (a, b), _bw)


def mul(a, b):
    out_data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return make_node(out_data, (a, b), _bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T, owned=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g, owned=True)

    return make_node(out_data, (a, b), _bw)


def relu(x):
    out_data = np.maximum(x.data, 0)

    def _bw(g):
        x.accumulate_grad(g * (out_data > 0), owned=True)

    return make_node(out_data, (x,), _bw)


def sigmoid(x):
    # piecewise form avoids overflow in exp for large |x|
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def _bw(g):
        x.accumulate_grad(g * (out_data * (1.0 - out_data)), owned=True)

    return make_node(out_data, (x,), _bw)


def reshape(x, shape):
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def _bw(g):
        x.accumulate_grad(g.reshape(old_shape))

    return make_node(out_data, (x,), _bw)


def tsum(x):
    """Sum of all elements; float64 accumulation, result in x's dtype."""
    out_data = np.asarray(x.data.sum(dtype=np.float64)).astype(x.dtype)

    def _bw(g):
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False))

    return make_node(out_data, (x,), _bw)


def tmean(x):
    n = x.data.size
    out_data = np.asarray(x.data.sum(dtype=np.float64) / n).astype(x.dtype)

    def _bw(g):
        x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False))

    return make_node(out_data, (x,), _bw)


def scale(x, c):
    """Multiply by a python scalar."""
    c = float(c)
    out_data = x.data * x.dtype.type(c)

    def _bw(g):
        x.accumulate_grad(g * x.dtype.type(c), owned=True)

    return make_node(out_data, (x,), _bw)


def backward(loss):
    """Run reverse-mode differentiation from a scalar tensor.

    Gradients accumulate into ``.grad`` of every tensor reached through the
    recorded graph that has ``requires_grad=True``; repeated calls without
    zeroing keep accumulating.
    """
    if loss.data.size != 1:
        raise AutogradError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise AutogradError("backward called on a tensor with no recorded history")

    # iterative post-order DFS
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # free intermediate gradient buffers; leaves keep theirs
    for node in topo:
        if node._backward is not None:
            node.grad = None
