"""Reverse-mode differentiation over a small, closed set of float64 ops.

Every backward rule is written with the same recorded ops, so running a
backward pass with ``create_graph=True`` yields gradients that are themselves
differentiable. Ops whose backward is not closed under this construction are
marked first-order only and raise :class:`SecondOrderError` if hit while
building a gradient graph.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    """A forward or backward op produced NaN or Inf."""


class SecondOrderError(RuntimeError):
    """An op without second-order support was met in a gradient graph."""


_state = threading.local()


def _recording():
    return getattr(_state, "recording", True)


def _building_grad_graph():
    return getattr(_state, "grad_graph", False)


@contextmanager
def no_grad():
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def _record(flag, grad_graph=False):
    prev, prev_gg = _recording(), _building_grad_graph()
    _state.recording = flag
    _state.grad_graph = grad_graph
    try:
        yield
    finally:
        _state.recording = prev
        _state.grad_graph = prev_gg


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite value in tensor constructor")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, power(as_tensor(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return scale(tsum(self, axis, keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data):
    # a sum is finite only if every term is; overflow falls back to the full scan
    s = data.sum()
    return np.isfinite(s) or bool(np.isfinite(data).all())


def _make(data, parents, backward_fn, op):
    if not _finite(data):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


# ---------------------------------------------------------------- linear ops

def add(a, b):
    if isinstance(b, (int, float)):
        return _make(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (sum_to(g, sa) if a.requires_grad else None,
                sum_to(g, sb) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a, c):
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (sum_to(mul(g, b), sa) if a.requires_grad else None,
                sum_to(mul(g, a), sb) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(key)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), backward, "concat")


def getitem(a, key):
    if isinstance(key, np.ndarray) and key.ndim == 1 and key.dtype.kind in "iu":
        return take_rows(a, key)
    shape = a.shape
    return _make(a.data[key], (a,), lambda g: (scatter_add(g, key, shape),), "getitem")


def scatter_add(g, key, shape):
    """Adjoint of ``getitem``: zeros of ``shape`` with ``g`` added at ``key``."""
    out = np.zeros(shape)
    basic = isinstance(key, slice) or (
        isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key))
    if basic:
        out[key] = g.data
    else:
        np.add.at(out, key, g.data)
    return _make(out, (g,), lambda h: (getitem(h, key),), "scatter_add")


def take_rows(a, index):
    """Rows ``a[index]`` for an integer index vector."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g: (segment_sum(g, index, n),), "take_rows")


def segment_sum(g, index, n):
    """Adjoint of ``take_rows``: row ``i`` sums the rows of ``g`` with ``index == i``."""
    m = len(index)
    sel = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
    flat = g.data.reshape(m, -1)
    data = np.asarray(sel @ flat).reshape((n,) + g.shape[1:])
    return _make(data, (g,), lambda h: (take_rows(h, index),), "segment_sum")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _make(np.asarray(data, dtype=np.float64), (a,), backward, "sum")


def broadcast_to(a, shape):
    src = a.shape
    data = np.array(np.broadcast_to(a.data, shape))
    return _make(data, (a,), lambda g: (sum_to(g, src),), "broadcast")


def sum_to(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    data = g.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    return _make(data.reshape(shape), (g,), lambda h: (broadcast_to(h, g.shape),), "sum_to")


def spmm(mat, a):
    """Constant sparse (or dense) matrix times tensor."""
    mat = sp.csr_matrix(mat)
    matT = mat.T.tocsr()
    return _make(np.asarray(mat @ a.data), (a,), lambda g: (spmm(matT, g),), "spmm")


# ------------------------------------------------------------ nonlinear ops

def leaky_relu(a, slope=0.2):
    # second derivative treated as zero (measure-zero kink)
    mask = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "leaky_relu")


def relu(a):
    return leaky_relu(a, 0.0)


def tanh(a):
    y_data = np.tanh(a.data)

    def backward(g):
        # y is rebuilt from a so the rule stays differentiable
        y = tanh(a)
        return (mul(g, add(neg(mul(y, y)), 1.0)),)

    return _make(y_data, (a,), backward, "tanh")


def power(a, p):
    if p != int(p) and (a.data <= 0).any():
        raise ValueError("non-integer power of a non-positive value")
    with np.errstate(all="ignore"):
        data = a.data ** p
    return _make(data, (a,), lambda g: (mul(g, scale(power(a, p - 1.0), p)),), "pow")


def sqrt(a):
    return power(a, 0.5)


def exp(a):
    with np.errstate(all="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), lambda g: (mul(g, exp(a)),), "exp")


def log(a):
    with np.errstate(all="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (mul(g, power(a, -1.0)),), "log")


def _first_order(name, grad_rule):
    def backward(g):
        if _building_grad_graph():
            raise SecondOrderError(f"op '{name}' has no second-order rule")
        return (Tensor(g.data * grad_rule()),)

    return backward


def softplus(a):
    x = a.data
    data = np.logaddexp(0.0, x)
    return _make(data, (a,), _first_order("softplus", lambda: 0.5 * (1.0 + np.tanh(0.5 * x))), "softplus")


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), _first_order("sigmoid", lambda: s * (1.0 - s)), "sigmoid")


def sqnorm(a, axis=-1):
    """Squared Euclidean norm along ``axis``."""
    return tsum(mul(a, a), axis=axis)


# --------------------------------------------------------------- gradients

def _toposort(root):
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
    return order


def _run_backward(output, create_graph):
    if output.size != 1:
        raise ValueError("gradient requires a scalar output")
    grads = {id(output): Tensor(np.ones_like(output.data))}
    order = _toposort(output)
    with _record(create_graph, grad_graph=create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return grads


def grad(output, inputs, create_graph=False):
    """Gradients of scalar ``output`` w.r.t. each of ``inputs``.

    Inputs the output does not depend on get zero gradients. With
    ``create_graph`` the returned tensors carry their own record and can be
    differentiated again.
    """
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    grads = _run_backward(output, create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return out


def backward(output):
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not output.requires_grad:
        return
    grads = _run_backward(output, create_graph=False)
    for node in _toposort(output):
        if node.backward_fn is None and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data
