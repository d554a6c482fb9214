"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor` holding its value, its inputs and a
closure that pushes the output gradient back to those inputs. ``backward``
walks the graph in reverse topological order. All values are float64.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
over broadcast axes.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


_KINKS = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op (abs, relu, clamp)
    evaluated inside the block. Two evaluations whose patterns differ sit on
    opposite sides of a kink, so a finite difference between them is invalid."""
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _note_kink(pattern):
    if _KINKS is not None:
        _KINKS.append(np.packbits(pattern.reshape(-1)))


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._inputs = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts):
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _make(data, inputs, backward_fn, op):
    out = Tensor(data)
    if _needs(*inputs):
        out.requires_grad = True
        out.op = op
        out._inputs = inputs
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _acc(a, -g), "neg")


def unary(a, value, deriv, op="unary"):
    """Elementwise op with precomputed value and local derivative arrays."""
    a = as_tensor(a)
    return _make(value, (a,), lambda g: _acc(a, g * deriv), op)


def exp(a):
    a = as_tensor(a)
    v = np.exp(a.data)
    return unary(a, v, v, "exp")


def log(a):
    a = as_tensor(a)
    return unary(a, np.log(a.data), 1.0 / a.data, "log")


def sqrt(a):
    a = as_tensor(a)
    v = np.sqrt(a.data)
    return unary(a, v, 0.5 / v, "sqrt")


def square(a):
    a = as_tensor(a)
    return unary(a, a.data * a.data, 2.0 * a.data, "square")


def abs(a):
    a = as_tensor(a)
    _note_kink(a.data > 0)
    return unary(a, np.abs(a.data), np.sign(a.data), "abs")


def relu(a):
    a = as_tensor(a)
    m = a.data > 0
    _note_kink(m)
    return unary(a, a.data * m, m.astype(np.float64), "relu")


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return unary(a, x * cdf, cdf + x * pdf, "gelu")


def tanh(a):
    a = as_tensor(a)
    v = np.tanh(a.data)
    return unary(a, v, 1.0 - v * v, "tanh")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    v = np.empty_like(x)
    pos = x >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    v[~pos] = e / (1.0 + e)
    return unary(a, v, v * (1.0 - v), "sigmoid")


def clamp(a, lo, hi):
    a = as_tensor(a)
    v = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    _note_kink(np.stack([a.data >= lo, a.data <= hi]))
    return unary(a, v, inside.astype(np.float64), "clamp")


# ----------------------------------------------------------------- structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims incompatible, {a.shape} @ {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: _acc(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: _acc(a, np.transpose(g, inv)), "transpose")


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _acc(a, full)

    return _make(np.array(out, copy=True), (a,), bw, "slice")


def take(a, indices, axis=0):
    """Gather along one axis with an integer index array (``gather(rows)`` for axis 0)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(np.moveaxis(full, axis, 0), indices, gm)
        _acc(a, full)

    return _make(out, (a,), bw, "take")


def gather_rows(a, rows):
    return take(a, rows, axis=0)


def concat(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat of empty list")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[k] != ts[0].shape[k] for k in range(nd) if k != axis):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                _acc(t, g[tuple(sl)])

    return _make(out, tuple(ts), bw, "concat")


def stack(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    nd = ts[0].ndim + 1
    axis = axis % nd
    exp_shape = list(ts[0].shape)
    exp_shape.insert(axis, 1)
    return concat([reshape(t, tuple(exp_shape)) for t in ts], axis=axis)


# ------------------------------------------------------------------ reductions

def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), bw, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xh).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - xh * gx))

    return _make(xh, (a,), bw, "layer_norm")


def cross(a, b):
    """Cross product over the last axis (size 3)."""
    i1, i2 = [1, 2, 0], [2, 0, 1]
    return take(a, i1, -1) * take(b, i2, -1) - take(a, i2, -1) * take(b, i1, -1)


# -------------------------------------------------------------------- backward

def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._inputs:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None
