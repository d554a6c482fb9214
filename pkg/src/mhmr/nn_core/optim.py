from __future__ import annotations

import numpy as np

from .layers import ParamStore

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(store: ParamStore, grads: dict, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS):
    """One bias-corrected Adam update, in place. Returns ``store``."""
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise KeyError(f"gradient keys do not match parameters: {sorted(missing)[:5]}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
