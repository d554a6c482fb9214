"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, record_kinks

ABS_FLOOR = 1e-6
# central differences of a float64 loss L carry round-off of roughly
# u * |L| / eps; entries below NOISE_FACTOR times that are judged absolutely
NOISE_FACTOR = 64.0


def rel_error(analytic, numeric, floor=ABS_FLOOR):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
    being judged on round-off alone."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(build, params: dict, eps=1e-5, samples_per_param=None, rng=None,
               corrupt=None, return_details=False, max_refine=3, groups=None):
    """Compare backward() against central differences.

    ``build()`` must rebuild the scalar loss Tensor from the current values of
    ``params`` (name -> Tensor with requires_grad). When ``samples_per_param``
    is given only that many coordinates per parameter are probed (chosen by
    ``rng``); otherwise every coordinate is. ``corrupt`` optionally maps the
    analytic gradient dict before comparison (harness fault injection).

    A probe whose +eps and -eps evaluations fall on different sides of a
    kink (abs/relu/clamp) is repeated with eps/100, up to ``max_refine``
    times. Entries whose analytic and numeric values are both below the
    round-off level of the difference quotient are compared absolutely
    against that level.

    With ``groups`` (group name -> list of parameter names) the error is
    measured norm-wise per group, ||a - n|| / max(||a||, ||n||), over the
    probed coordinates; this is robust to individual entries that sit below
    the finite-difference round-off. Per-entry maxima are always reported.

    Returns the max relative error, or (max, info) with ``return_details``
    where info has per-parameter / per-group errors, the noise level and
    refine count.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = build()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    if corrupt is not None:
        analytic = corrupt(analytic)
    scale = max(abs(float(loss.data)), 1.0) * np.finfo(np.float64).eps * NOISE_FACTOR

    def probe(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        with record_kinks() as ku:
            up = float(build().data)
        flat[i] = orig - h
        with record_kinks() as kd:
            down = float(build().data)
        flat[i] = orig
        return (up - down) / (2 * h), _same(ku, kd)

    worst, per, refined, tiny = 0.0, {}, 0, 0
    pairs = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples_per_param, replace=False)
        errs, got = [], []
        for i in idx:
            h = eps
            num, smooth = probe(flat, i, h)
            for _ in range(max_refine):
                if smooth:
                    break
                h /= 100.0
                refined += 1
                num, smooth = probe(flat, i, h)
            a = analytic[name].reshape(-1)[i]
            got.append((a, num))
            noise = scale / h
            if max(abs(a), abs(num)) < noise:
                tiny += 1
                errs.append(0.0 if abs(a - num) <= noise else float("inf"))
            else:
                errs.append(float(rel_error(a, num)))
        pairs[name] = np.array(got).reshape(-1, 2)
        per[name] = max(errs) if errs else 0.0
        worst = max(worst, per[name])
    for p in params.values():
        p.grad = None
    info = {"per_param": per, "noise_level": scale / eps, "refined": refined,
            "below_noise": tiny}
    if groups is not None:
        per_group = {}
        for g, names in groups.items():
            ab = np.concatenate([pairs[n] for n in names if n in pairs])
            a, n = ab[:, 0], ab[:, 1]
            denom = max(np.linalg.norm(a), np.linalg.norm(n), ABS_FLOOR)
            per_group[g] = float(np.linalg.norm(a - n) / denom)
        info["per_group"] = per_group
        worst = max(per_group.values()) if per_group else 0.0
    return (worst, info) if return_details else worst


def leaf(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)
