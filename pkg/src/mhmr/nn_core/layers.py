"""Parameter store and the small layer vocabulary used by the network."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named trainable arrays plus per-parameter Adam state."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by their top-level prefix (``encoder.0`` etc.)."""
        out: dict[str, list[str]] = {}
        for k in self.params:
            parts = k.split(".")
            key = ".".join(parts[:2]) if len(parts) > 2 else parts[0]
            out.setdefault(key, []).append(k)
        return out


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, name, din, dout, rng, bias=True, scale=1.0):
        self.W = store.add(f"{name}.W", scale * _uniform(rng, din, (din, dout)))
        self.b = store.add(f"{name}.b", scale * _uniform(rng, din, (dout,))) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name, dim, eps=1e-5):
        self.gain = store.add(f"{name}.g", np.ones(dim))
        self.bias = store.add(f"{name}.b", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.eps) * self.gain + self.bias


class MLP:
    """Two-layer perceptron with GELU."""

    def __init__(self, store, name, din, hidden, dout, rng, out_scale=1.0):
        self.fc1 = Linear(store, f"{name}.fc1", din, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dout, rng, scale=out_scale)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def attention(q, k, v, heads, mask=None):
    """Multi-head scaled dot-product attention on already projected inputs.

    q: (..., N, Dq), k: (..., M, Dq), v: (..., M, Dv). ``mask`` is an
    additive (N, M) array (0 or a large negative number). Returns (..., N, Dv)
    with the heads concatenated.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    dq, dv = q.shape[-1], v.shape[-1]
    if dq % heads or dv % heads:
        raise T.ShapeError(f"attention: widths {dq}, {dv} not divisible by {heads} heads")
    if k.shape[-1] != dq:
        raise T.ShapeError(f"attention: query width {dq} != key width {k.shape[-1]}")
    lead = q.shape[:-2]
    n, m = q.shape[-2], k.shape[-2]

    def split(x, length, width):
        x = T.reshape(x, lead + (length, heads, width // heads))
        nl = len(lead)
        return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    qh, kh, vh = split(q, n, dq), split(k, m, dq), split(v, m, dv)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dq // heads))
    if mask is not None:
        scores = scores + mask
    w = T.softmax(scores, axis=-1)
    out = T.matmul(w, vh)
    nl = len(lead)
    out = T.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return T.reshape(out, lead + (n, dv))


class Attention:
    """Projected multi-head attention: queries of width ``dq_in`` attend to
    context of width ``dk_in``; output is projected back to ``dq_in``."""

    def __init__(self, store, name, dq_in, dk_in, dim, heads, rng):
        if dim % heads:
            raise T.ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", dq_in, dim, rng)
        self.k = Linear(store, f"{name}.k", dk_in, dim, rng, bias=False)  # softmax ignores a key bias
        self.v = Linear(store, f"{name}.v", dk_in, dim, rng)
        self.o = Linear(store, f"{name}.o", dim, dq_in, rng)

    def __call__(self, x, context, mask=None):
        return self.o(attention(self.q(x), self.k(context), self.v(context), self.heads, mask))
