"""Evaluation: person matching, mesh / joint errors (optionally Procrustes
aligned), PCK3D, detection rates, MRPE, PCOD and F1-normalized errors.

Errors are reported in millimetres. Vertex and joint errors are computed
after centering both sides on their pelvis joint.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import procrustes_align

PCK_THRESHOLD = 0.15
TIE_TOL = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class Matching:
    pairs: list  # [(pred index, gt index)]
    unmatched_preds: list
    unmatched_gts: list
    num_preds: int
    num_gts: int

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def precision(self):
        return rate(self.tp, self.num_preds, self.num_gts == 0)

    @property
    def recall(self):
        return rate(self.tp, self.num_gts, self.num_preds == 0)

    @property
    def f1(self):
        return f1_score(self.tp, self.num_preds, self.num_gts)


def rate(hits, total, vacuous):
    """hits / total; with total == 0 the rate is 1 when the other side is empty
    too (nothing to find, nothing wrongly found) and 0 otherwise."""
    if total == 0:
        return 1.0 if vacuous else 0.0
    return hits / total


def f1_score(tp, num_preds, num_gts):
    if num_preds == 0 and num_gts == 0:
        return 1.0
    denom = num_preds + num_gts
    return 2.0 * tp / denom


def match_people(pred_coords, gt_coords, threshold) -> Matching:
    """Optimal one-to-one matching on 2D primary-keypoint distance.

    Pairs farther apart than ``threshold`` pixels are not allowed. Among
    assignments the one with the most pairs wins, ties broken by the
    smallest total distance.
    """
    if not threshold > 0:
        raise MetricError("matching threshold must be positive")
    P = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 2)
    G = np.asarray(gt_coords, dtype=np.float64).reshape(-1, 2)
    n, m = len(P), len(G)
    pairs = []
    if n and m:
        D = np.linalg.norm(P[:, None] - G[None], axis=-1)
        ok = D <= threshold
        # any single forbidden pair costs more than every allowed assignment
        big = threshold * (min(n, m) + 1) + 1.0
        rows, cols = linear_sum_assignment(np.where(ok, D, big))
        pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols) if ok[r, c])
    mp = {p for p, _ in pairs}
    mg = {g for _, g in pairs}
    return Matching(pairs, [i for i in range(n) if i not in mp],
                    [j for j in range(m) if j not in mg], n, m)


def brute_force_matching(pred_coords, gt_coords, threshold):
    """Exhaustive reference: (number of pairs, total distance) optimum."""
    P = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 2)
    G = np.asarray(gt_coords, dtype=np.float64).reshape(-1, 2)
    n, m = len(P), len(G)
    best = (0, 0.0, [])
    for k in range(1, min(n, m) + 1):
        for ps in itertools.combinations(range(n), k):
            for gs in itertools.permutations(range(m), k):
                d = [np.linalg.norm(P[a] - G[b]) for a, b in zip(ps, gs)]
                if max(d) > threshold:
                    continue
                tot = math.fsum(d)
                if k > best[0] or (k == best[0] and tot < best[1]):
                    best = (k, tot, sorted(zip(ps, gs)))
    return best


def _center(x, root):
    x = np.asarray(x, dtype=np.float64)
    return x - np.asarray(root, dtype=np.float64)


def pve(pred_vertices, gt_vertices, pred_root=None, gt_root=None, align="none", mask=None):
    """Mean per-vertex error in mm after root centering (and optional
    Procrustes alignment of the prediction onto the ground truth, fitted on
    the masked vertices)."""
    p = np.asarray(pred_vertices, dtype=np.float64)
    g = np.asarray(gt_vertices, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"vertex arrays differ: {p.shape} vs {g.shape}")
    if pred_root is not None:
        p = _center(p, pred_root)
    if gt_root is not None:
        g = _center(g, gt_root)
    if mask is not None:
        p, g = p[mask], g[mask]
    if align == "procrustes":
        p = procrustes_align(p, g).apply(p)
    elif align != "none":
        raise MetricError(f"unknown alignment {align!r}")
    return float(np.linalg.norm(p - g, axis=-1).mean() * 1000.0)


def mpjpe(pred_joints, gt_joints, root=None, align="none"):
    """Mean per-joint error in mm; ``root`` is the joint index used to center."""
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    pr = gr = None
    if root is not None:
        pr, gr = p[root], g[root]
    return pve(p, g, pr, gr, align=align)


def pa_mpjpe(pred_joints, gt_joints, root=None):
    return mpjpe(pred_joints, gt_joints, root, align="procrustes")


def pck3d(pred_joints, gt_joints, threshold=PCK_THRESHOLD, root=None):
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    if root is not None:
        p, g = p - p[root], g - g[root]
    err = np.linalg.norm(p - g, axis=-1)
    return float(np.count_nonzero(err < threshold) / err.size)


def mrpe(pred_root, gt_root):
    return float(np.linalg.norm(np.asarray(pred_root) - np.asarray(gt_root)) * 1000.0)


def pcod_counts(pred_depths, gt_depths, tie=TIE_TOL):
    """(correct pairs, total pairs) of ordinal depth agreement."""
    p = np.asarray(pred_depths, dtype=np.float64)
    g = np.asarray(gt_depths, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError("depth arrays differ in length")

    def order(a, b):
        return 0 if abs(a - b) < tie else (1 if a > b else -1)

    ok = tot = 0
    for i, j in itertools.combinations(range(len(p)), 2):
        tot += 1
        ok += order(p[i], p[j]) == order(g[i], g[j])
    return ok, tot


def pcod(pred_depths, gt_depths, tie=TIE_TOL):
    """Fraction of correctly ordered pairs; None with fewer than two people."""
    ok, tot = pcod_counts(pred_depths, gt_depths, tie)
    return ok / tot if tot else None


@dataclass
class MetricReport:
    pve: float | None = None
    pa_pve: float | None = None
    pve_hands: float | None = None
    pve_face: float | None = None
    mpjpe: float | None = None
    pa_mpjpe: float | None = None
    pck3d: float | None = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    mrpe: float | None = None
    pcod: float | None = None
    nmve: float | None = None
    nmje: float | None = None
    counts: dict = field(default_factory=dict)

    ORDER = ("pve", "pa_pve", "pve_hands", "pve_face", "mpjpe", "pa_mpjpe", "pck3d",
             "precision", "recall", "f1", "mrpe", "pcod", "nmve", "nmje")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def table(self) -> str:
        lines = []
        for k in self.ORDER:
            v = getattr(self, k)
            lines.append(f"{k:<10} {'-' if v is None else f'{v:.4f}'}")
        return "\n".join(lines)


@dataclass
class PersonRecord:
    """What the metrics need about one person (prediction or ground truth)."""
    coords: np.ndarray  # projected primary keypoint, pixels
    vertices: np.ndarray  # (V, 3) camera space
    joints: np.ndarray  # (J, 3) camera space


class Accumulator:
    """Pools per-pair errors across images; results do not depend on the order
    images are added (sums use fsum)."""

    KEYS = ("pve", "pa_pve", "pve_hands", "pve_face", "mpjpe", "pa_mpjpe", "pck3d", "mrpe")

    def __init__(self, model, threshold):
        self.model = model
        self.threshold = threshold
        self.values = {k: [] for k in self.KEYS}
        self.tp = self.npred = self.ngt = 0
        self.pcod_ok = self.pcod_tot = 0
        self.hands = model.part_mask("hands")
        self.face = model.part_mask("face")
        self.lsp = model.lsp_joints

    def add(self, preds, gts, pairs=None):
        """``preds``/``gts``: lists of PersonRecord. ``pairs`` skips matching
        (teacher-forced evaluation)."""
        if pairs is None:
            mt = match_people([p.coords for p in preds], [g.coords for g in gts], self.threshold)
            pairs = mt.pairs
        self.tp += len(pairs)
        self.npred += len(preds)
        self.ngt += len(gts)
        r = self.model.root_joint
        for a, b in pairs:
            p, g = preds[a], gts[b]
            pr, gr = p.joints[r], g.joints[r]
            v = self.values
            v["pve"].append(pve(p.vertices, g.vertices, pr, gr))
            v["pa_pve"].append(pve(p.vertices, g.vertices, pr, gr, align="procrustes"))
            if self.hands.any():
                v["pve_hands"].append(pve(p.vertices, g.vertices, pr, gr, mask=self.hands))
            if self.face.any():
                v["pve_face"].append(pve(p.vertices, g.vertices, pr, gr, mask=self.face))
            v["mpjpe"].append(mpjpe(p.joints, g.joints, r))
            v["pa_mpjpe"].append(pa_mpjpe(p.joints, g.joints, r))
            v["pck3d"].append(pck3d((p.joints - pr)[self.lsp], (g.joints - gr)[self.lsp]))
            v["mrpe"].append(mrpe(pr, gr))
        if len(pairs) >= 2:
            ok, tot = pcod_counts([preds[a].joints[r][2] for a, _ in pairs],
                                  [gts[b].joints[r][2] for _, b in pairs])
            self.pcod_ok += ok
            self.pcod_tot += tot

    def report(self) -> MetricReport:
        mean = {k: (math.fsum(v) / len(v) if v else None) for k, v in self.values.items()}
        rep = MetricReport(**mean)
        rep.precision = rate(self.tp, self.npred, self.ngt == 0)
        rep.recall = rate(self.tp, self.ngt, self.npred == 0)
        rep.f1 = f1_score(self.tp, self.npred, self.ngt)
        rep.pcod = self.pcod_ok / self.pcod_tot if self.pcod_tot else None
        if rep.f1 > 0:
            rep.nmve = None if rep.pve is None else rep.pve / rep.f1
            rep.nmje = None if rep.mpjpe is None else rep.mpjpe / rep.f1
        rep.counts = {"tp": self.tp, "predictions": self.npred, "ground_truth": self.ngt,
                      "pairs_pcod": self.pcod_tot, "threshold_px": self.threshold}
        return rep


def report(preds, gts, model, threshold) -> MetricReport:
    """Single-image report."""
    acc = Accumulator(model, threshold)
    acc.add(preds, gts)
    return acc.report()
