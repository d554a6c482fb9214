"""Training losses: detection BCE, L1 on [c, x, d], L1 on centered vertices and
L1 on reprojected vertices, combined as det + params + lam * (mesh + reproj).

All terms are sums over tokens / people / vertices; ``compute_losses``
divides by the batch size only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .nn_core import tensor as T

EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lam: float = 0.5
    det: bool = True
    params: bool = True  # rotation / shape / expression / coords / depth L1
    mesh: bool = True  # v3d
    reproj: bool = True  # v2d

    def __post_init__(self):
        if not self.lam >= 0:
            raise LossError(f"lambda must be nonnegative, got {self.lam}")

    @classmethod
    def ablation(cls, name, lam=0.5):
        """Presets: 'v3d', 'rot', 'rot+v3d', 'rot+v3d+v2d'."""
        table = {"v3d": (False, True, False), "rot": (True, False, False),
                 "rot+v3d": (True, True, False), "rot+v3d+v2d": (True, True, True)}
        if name not in table:
            raise LossError(f"unknown ablation {name!r}; choose from {sorted(table)}")
        p, m, r = table[name]
        return cls(lam=lam, params=p, mesh=m, reproj=r)

    def to_dict(self):
        return asdict(self)


def score_vector(score_map):
    """(grid_w, grid_h) map indexed [i, j] -> row-major token vector."""
    return np.asarray(score_map, dtype=np.float64).T.reshape(-1)


def bce(scores, target):
    s = T.clamp(T.as_tensor(scores), EPS, 1.0 - EPS)
    target = np.asarray(target, dtype=np.float64)
    return T.neg(T.reduce_sum(T.log(s) * target + T.log(1.0 - s) * (1.0 - target)))


def detection_loss(scores, target):
    scores = T.as_tensor(scores)
    target = np.asarray(target, dtype=np.float64)
    if scores.shape != target.shape:
        raise LossError(f"score shape {scores.shape} != target shape {target.shape}")
    return bce(scores, target)


def params_loss(coords, pose, betas, expr, depth, gt):
    """Sum of L1 over [c, x, d]; ``gt`` has matching fields (coords, pose, shape,
    expression, depth) stacked over the same people."""
    terms = [(coords, gt["coords"]), (pose, gt["pose"]), (betas, gt["shape"]),
             (expr, gt["expression"]), (depth, gt["depth"])]
    total = None
    for p, g in terms:
        p = T.as_tensor(p)
        if p.shape != np.shape(g):
            raise LossError(f"params_loss shape mismatch {p.shape} vs {np.shape(g)}")
        t = T.reduce_sum(T.abs(p - g))
        total = t if total is None else total + t
    return total


def mesh_loss(pred_vertices, gt_vertices):
    p = T.as_tensor(pred_vertices)
    if p.shape != np.shape(gt_vertices):
        raise LossError(f"mesh_loss shape mismatch {p.shape} vs {np.shape(gt_vertices)}")
    return T.reduce_sum(T.abs(p - gt_vertices))


def project_t(points, focal, principal):
    """Differentiable pinhole projection of (N, V, 3) with per-person (N,) focal
    and (N, 2) principal point. Returns pixels and the z<=0 mask."""
    points = T.as_tensor(points)
    z = points.data[..., 2]
    valid = z > 0
    m = valid.astype(np.float64)[..., None]
    zt = T.getitem(points, (Ellipsis, slice(2, 3)))
    zs = zt * m + (1.0 - m)
    xy = T.getitem(points, (Ellipsis, slice(0, 2)))
    f = np.asarray(focal, dtype=np.float64).reshape(-1, 1, 1)
    c = np.asarray(principal, dtype=np.float64).reshape(-1, 1, 2)
    return xy / zs * f + c, valid


def reproj_loss(pred_vertices, pred_location, pred_focal, pred_principal,
                gt_vertices, gt_location, gt_focal, gt_principal):
    """L1 in pixels between projections of placed meshes.

    Vertices behind the camera (either side) are excluded; returns
    (loss, number excluded).
    """
    pred_world = T.as_tensor(pred_vertices) + T.reshape(T.as_tensor(pred_location),
                                                        (-1, 1, 3))
    gt_world = np.asarray(gt_vertices) + np.asarray(gt_location)[:, None, :]
    uv, valid = project_t(pred_world, pred_focal, pred_principal)
    gz = gt_world[..., 2]
    gvalid = gz > 0
    gz = np.where(gvalid, gz, 1.0)
    f = np.asarray(gt_focal, dtype=np.float64).reshape(-1, 1)
    c = np.asarray(gt_principal, dtype=np.float64).reshape(-1, 1, 2)
    guv = gt_world[..., :2] / gz[..., None] * f[..., None] + c
    keep = (valid & gvalid).astype(np.float64)[..., None]
    loss = T.reduce_sum(T.abs(uv - guv) * keep)
    return loss, int(keep.size - keep.sum())


def total_loss(parts, lam=0.5):
    det, params, mesh, reproj = parts
    if lam < 0:
        raise LossError("lambda must be nonnegative")
    return det + params + (mesh + reproj) * lam


def gather_targets(targets):
    """Stack per-image TrainTargets into per-person arrays (same order as
    teacher_forced_forward)."""
    keys = ("coords", "pose", "shape", "expression", "depth", "vertices", "location")
    out = {}
    for k in keys:
        arrs = [getattr(t, k) for t in targets if t.count]
        out[k] = np.concatenate(arrs) if arrs else np.zeros((0,))
    return out


def compute_losses(out, targets, cameras, weights: LossWeights = None):
    """Loss breakdown for a teacher-forced batch. Returns dict of Tensors
    (det, params, mesh, reproj, total) plus 'excluded' (int)."""
    w = weights or LossWeights()
    B = len(targets)
    zero = T.as_tensor(0.0)
    S = np.stack([score_vector(t.score_map) for t in targets])
    det = detection_loss(out["scores"], S) if w.det else zero
    params = mesh = reproj = zero
    excluded = 0
    if len(out.get("tokens", ())):
        gt = gather_targets(targets)
        if w.params:
            params = params_loss(out["coords"], out["pose"], out["betas"], out["expr"],
                                 out["depth"], gt)
        if w.mesh:
            mesh = mesh_loss(out["vertices"], gt["vertices"])
        if w.reproj:
            ids = out["img_ids"]
            gf = np.array([cameras[b].focal for b in ids])
            gp = np.array([cameras[b].principal_point for b in ids], dtype=np.float64)
            reproj, excluded = reproj_loss(out["vertices"], out["location"], out["focal"],
                                           out["principal"], gt["vertices"], gt["location"],
                                           gf, gp)
    scale = 1.0 / B
    parts = [det * scale, params * scale, mesh * scale, reproj * scale]
    total = total_loss(parts, w.lam)
    return dict(det=parts[0], params=parts[1], mesh=parts[2], reproj=parts[3],
                total=total, excluded=excluded)


def log_record(step, losses) -> str:
    """One JSON-lines row."""
    rec = {"step": int(step)}
    for k in ("det", "params", "mesh", "reproj", "total"):
        v = losses[k]
        rec[k] = float(v.data if isinstance(v, T.Tensor) else v)
    if losses.get("excluded"):
        rec["excluded"] = int(losses["excluded"])
    return json.dumps(rec)
