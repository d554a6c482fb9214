"""A small SMPL-X-like whole-body model.

The toy humanoid is built procedurally from a seed: a 53-joint skeleton
(pelvis, 21 body joints, 2x15 finger joints, jaw) of which the first ``J`` by
priority are articulated, a capsule-ring surface with ``V`` vertices, smooth
skinning weights, shape and expression blendshapes and a joint regressor.
Everything is left/right mirror symmetric so a horizontal flip is exact.

``forward`` poses the mesh with forward kinematics + linear blend skinning
and re-centers it on the head (primary) joint. The differentiable version
``forward_t`` takes rotation matrices as Tensors; the numpy version takes
axis-angle parameters.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .nn_core import tensor as T
from .nn_core.tensor import Tensor

MAX_JOINTS = 53

# name, parent name, rest position (x right/left-of-body, y down, z away from camera)
_BODY = [
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("left_hip", "pelvis", (0.09, 0.06, 0.0)),
    ("right_hip", "pelvis", (-0.09, 0.06, 0.0)),
    ("spine1", "pelvis", (0.0, -0.11, 0.0)),
    ("left_knee", "left_hip", (0.10, 0.46, 0.0)),
    ("right_knee", "right_hip", (-0.10, 0.46, 0.0)),
    ("spine2", "spine1", (0.0, -0.24, 0.0)),
    ("left_ankle", "left_knee", (0.10, 0.86, 0.02)),
    ("right_ankle", "right_knee", (-0.10, 0.86, 0.02)),
    ("spine3", "spine2", (0.0, -0.32, 0.0)),
    ("left_foot", "left_ankle", (0.10, 0.92, -0.08)),
    ("right_foot", "right_ankle", (-0.10, 0.92, -0.08)),
    ("neck", "spine3", (0.0, -0.52, 0.0)),
    ("left_collar", "spine3", (0.07, -0.45, 0.0)),
    ("right_collar", "spine3", (-0.07, -0.45, 0.0)),
    ("head", "neck", (0.0, -0.64, 0.0)),
    ("left_shoulder", "left_collar", (0.18, -0.47, 0.0)),
    ("right_shoulder", "right_collar", (-0.18, -0.47, 0.0)),
    ("left_elbow", "left_shoulder", (0.44, -0.47, 0.0)),
    ("right_elbow", "right_shoulder", (-0.44, -0.47, 0.0)),
    ("left_wrist", "left_elbow", (0.69, -0.47, 0.0)),
    ("right_wrist", "right_elbow", (-0.69, -0.47, 0.0)),
]
_FINGERS = [("index", -0.025), ("middle", -0.008), ("pinky", 0.026), ("ring", 0.009), ("thumb", -0.045)]

# articulated joints in order of priority when J < 53
_PRIORITY = [
    "pelvis", "spine3", "head", "jaw", "left_shoulder", "right_shoulder", "left_elbow",
    "right_elbow", "left_hip", "right_hip", "left_knee", "right_knee", "left_wrist",
    "right_wrist", "left_ankle", "right_ankle", "neck", "spine1", "spine2", "left_collar",
    "right_collar", "left_foot", "right_foot",
]

LSP_NAMES = ["head", "neck", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
             "left_wrist", "right_wrist", "left_hip", "right_hip", "left_knee", "right_knee",
             "left_ankle", "right_ankle"]

PART_BODY, PART_LHAND, PART_RHAND, PART_FACE = 0, 1, 2, 3
PART_NAMES = ("body", "left-hand", "right-hand", "face")


class BodyModelError(ValueError):
    pass


def _full_skeleton():
    names, parents, pos = [], [], []
    for n, p, x in _BODY:
        names.append(n)
        parents.append(names.index(p) if p else -1)
        pos.append(x)
    for side, sx in (("left", 1.0), ("right", -1.0)):
        wrist = names.index(f"{side}_wrist")
        wx = _BODY[wrist][2]
        for fname, dz in _FINGERS:
            parent = wrist
            for k in range(3):
                x = wx[0] + sx * (0.085 + 0.028 * k if fname != "thumb" else 0.04 + 0.026 * k)
                names.append(f"{side}_{fname}{k + 1}")
                parents.append(parent)
                pos.append((x, wx[1] + (0.01 if fname == "thumb" else 0.0), dz))
                parent = len(names) - 1
    names.append("jaw")
    parents.append(names.index("head"))
    pos.append((0.0, -0.62, -0.03))
    return names, np.array(parents), np.array(pos, dtype=np.float64)


def _mirror_name(n):
    if n.startswith("left_"):
        return "right_" + n[5:]
    if n.startswith("right_"):
        return "left_" + n[6:]
    return n


def _seg_dist(x, a, b):
    ab = b - a
    t = np.clip(((x - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(x - (a + t[:, None] * ab), axis=1)


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (V, 3)
    parents: np.ndarray  # (J,)
    rest_joints: np.ndarray  # (J, 3)
    skin_weights: np.ndarray  # (V, J)
    shape_dirs: np.ndarray  # (V, 3, B)
    expr_dirs: np.ndarray  # (V, 3, E)
    joint_regressor: np.ndarray  # (J, V)
    primary_joint: int
    root_joint: int
    part_labels: np.ndarray  # (V,) in PART_*
    joint_names: tuple
    faces: np.ndarray  # (F, 3) int
    vertex_mirror: np.ndarray  # (V,) vertex index of the mirror image
    joint_mirror: np.ndarray  # (J,)
    seed: int = 0
    levels: tuple = field(default=(), repr=False)

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def num_joints(self):
        return self.parents.shape[0]

    @property
    def num_betas(self):
        return self.shape_dirs.shape[2]

    @property
    def num_expr(self):
        return self.expr_dirs.shape[2]

    @property
    def param_dim(self):
        return 3 * self.num_joints + self.num_betas + self.num_expr

    def joint_index(self, name):
        return self.joint_names.index(name)

    @property
    def lsp_joints(self):
        """Indices of the 14-joint LSP evaluation subset present in this skeleton."""
        return np.array([self.joint_names.index(n) for n in LSP_NAMES if n in self.joint_names])

    def part_mask(self, part):
        if part == "all":
            return np.ones(self.num_vertices, dtype=bool)
        if part == "hands":
            return (self.part_labels == PART_LHAND) | (self.part_labels == PART_RHAND)
        if part == "face":
            return self.part_labels == PART_FACE
        raise BodyModelError(f"unknown part {part!r}")


@dataclass
class BodyParams:
    pose: np.ndarray  # (J, 3) axis-angle
    shape: np.ndarray  # (B,)
    expression: np.ndarray  # (E,)

    def flat(self):
        return np.concatenate([self.pose.reshape(-1), self.shape, self.expression])

    @classmethod
    def from_flat(cls, vec, J, B, E):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3 * J].reshape(J, 3).copy(), vec[3 * J:3 * J + B].copy(),
                   vec[3 * J + B:3 * J + B + E].copy())

    def copy(self):
        return BodyParams(self.pose.copy(), self.shape.copy(), self.expression.copy())


def _tree_levels(parents):
    depth = np.zeros(len(parents), dtype=int)
    for j in range(1, len(parents)):
        depth[j] = depth[parents[j]] + 1
    levels = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
    pos_in_level = np.zeros(len(parents), dtype=int)
    for lv in levels:
        pos_in_level[lv] = np.arange(len(lv))
    order = np.concatenate(levels)
    inv = np.argsort(order)
    par_pos = [None] + [pos_in_level[parents[lv]] for lv in levels[1:]]
    return tuple(levels), tuple(par_pos), inv


def make_toy_model(seed=0, V=1024, J=53, B=10, E=10) -> BodyModel:
    """Deterministic toy whole-body model."""
    if V < 100 or J < 4 or J > MAX_JOINTS or B < 1 or E < 1:
        raise BodyModelError(f"invalid model size V={V} J={J} B={B} E={E} "
                             f"(need V>=100, 4<=J<={MAX_JOINTS}, B,E>=1)")
    if V < 2 * J + 12:
        raise BodyModelError(f"V={V} too small for J={J} (need V >= 2J + 12)")
    rng = np.random.default_rng(seed)
    names, full_par, full_pos = _full_skeleton()

    priority = _PRIORITY + [n for n in names if n not in _PRIORITY]
    kept_names = set(priority[:J])
    kept = [i for i, n in enumerate(names) if n in kept_names]
    kidx = {full: k for k, full in enumerate(kept)}

    def owner(full):  # nearest articulated ancestor (or self)
        while full not in kidx:
            full = full_par[full]
        return kidx[full]

    parents = np.array([-1] + [owner(full_par[f]) for f in kept[1:]])
    rest = full_pos[kept]
    jnames = tuple(names[f] for f in kept)
    symmetric = all(_mirror_name(n) in jnames for n in jnames)
    jmirror = np.array([jnames.index(_mirror_name(n)) if _mirror_name(n) in jnames else k
                        for k, n in enumerate(jnames)])

    # bones of the full skeleton (parent -> child), owned by the articulated owner of the parent
    bones = [(full_pos[full_par[c]], full_pos[c], owner(full_par[c])) for c in range(1, len(names))]
    tips = {"head": (0.0, -0.84, 0.0), "jaw": (0.0, -0.60, -0.09)}
    for n in names:
        i = names.index(n)
        if n in tips:
            bones.append((full_pos[i], np.array(tips[n]), owner(i)))
        elif n.endswith("3"):
            d = full_pos[i] - full_pos[full_par[i]]
            bones.append((full_pos[i], full_pos[i] + d, owner(i)))
        elif n.endswith("_foot"):
            bones.append((full_pos[i], full_pos[i] + np.array([0.0, 0.0, -0.08]), owner(i)))

    # surface segments: (start, end, radius, part); left side entries are mirrored to the right
    c = {n: full_pos[names.index(n)] for n in names}
    central = [
        (c["pelvis"] + [0, 0.04, 0], c["spine1"], 0.13, PART_BODY),
        (c["spine1"], c["spine3"], 0.14, PART_BODY),
        (c["spine3"], c["neck"] + [0, 0.02, 0], 0.15, PART_BODY),
        (c["neck"], c["head"], 0.05, PART_BODY),
        (c["head"] + [0, 0.02, 0], np.array(tips["head"]), 0.09, PART_FACE),
        (c["jaw"], np.array(tips["jaw"]), 0.035, PART_FACE),
    ]
    side = [
        (c["left_hip"], c["left_knee"], 0.07, PART_BODY),
        (c["left_knee"], c["left_ankle"], 0.05, PART_BODY),
        (c["left_ankle"], c["left_foot"] + [0, 0, -0.06], 0.04, PART_BODY),
        (c["left_collar"], c["left_shoulder"], 0.05, PART_BODY),
        (c["left_shoulder"], c["left_elbow"], 0.05, PART_BODY),
        (c["left_elbow"], c["left_wrist"], 0.04, PART_BODY),
        (c["left_wrist"], c["left_wrist"] + [0.08, 0, 0], 0.035, PART_LHAND),
    ]
    for fname, _ in _FINGERS:
        a, b = c[f"left_{fname}1"], c[f"left_{fname}3"]
        side.append((a, b + (b - a) / 2.0, 0.01, PART_LHAND))

    nsurf = V - 2 * J
    areas = np.array([2 * np.pi * r * np.linalg.norm(b - a) for a, b, r, _ in central]
                     + [2 * 2 * np.pi * r * np.linalg.norm(b - a) for a, b, r, _ in side])
    unit = np.array([6] * len(central) + [12] * len(side))
    rings = np.zeros(len(unit), dtype=int)
    parts = [seg[3] for seg in central + side]
    thin = [seg[2] < 0.02 for seg in central + side]
    budget = nsurf
    for k in np.argsort(-areas, kind="stable"):  # one ring for face and palms first
        if parts[k] != PART_BODY and not thin[k] and unit[k] <= budget:
            rings[k] += 1
            budget -= unit[k]
    while True:  # then by area deficit
        share = areas / areas.sum() * nsurf
        deficit = share - rings * unit
        order = [k for k in np.argsort(-deficit, kind="stable") if unit[k] <= budget]
        if not order:
            break
        rings[order[0]] += 1
        budget -= unit[order[0]]

    cos_s = np.cos(np.deg2rad([0.0, 60.0, 300.0]))
    sin_s = np.sin(np.deg2rad([0.0, 60.0, 300.0]))
    ring_cs = [(cos_s[0], sin_s[0]), (cos_s[1], sin_s[1]), (-cos_s[1], sin_s[1]),
               (-cos_s[0], sin_s[0]), (-cos_s[2], sin_s[2]), (cos_s[2], sin_s[2])]

    def ring_points(a, b, r, n, basis_u=None):
        d = b - a
        dn = d / np.linalg.norm(d)
        u = basis_u if basis_u is not None else np.array([1.0, 0.0, 0.0])
        u = u - (u @ dn) * dn
        u /= np.linalg.norm(u)
        w = np.cross(dn, u)
        pts = []
        for k in range(n):
            ctr = a + (k + 0.5) / n * d
            for cs, sn in ring_cs:
                pts.append(ctr + r * (cs * u + sn * w))
        return np.array(pts)

    verts, labels, faces, mirror = [], [], [], []

    def add_faces(start, n, flip=False):
        for k in range(n - 1):
            for a in range(6):
                p0, p1 = start + 6 * k + a, start + 6 * k + (a + 1) % 6
                q0, q1 = p0 + 6, p1 + 6
                tris = [(p0, p1, q0), (p1, q1, q0)]
                faces.extend([(t[0], t[2], t[1]) for t in tris] if flip else tris)

    M = np.array([-1.0, 1.0, 1.0])
    for (a, b, r, part), n in zip(central, rings[:len(central)]):
        if n == 0:
            continue
        start = len(verts)
        pts = ring_points(a, b, r, n)
        verts.extend(pts)
        labels.extend([part] * len(pts))
        add_faces(start, n)
        # ring slots (0..5) mirror pairwise: 0<->3, 1<->2, 4<->5
        slot_m = [3, 2, 1, 0, 5, 4]
        mirror.extend([start + 6 * k + slot_m[s] for k in range(n) for s in range(6)])
    for (a, b, r, part), n in zip(side, rings[len(central):]):
        if n == 0:
            continue
        d = b - a
        basis = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.5 * np.linalg.norm(d) else None
        pts = ring_points(a, b, r, n, basis)
        ls, rs = len(verts), len(verts) + len(pts)
        verts.extend(pts)
        verts.extend(pts * M)
        labels.extend([part] * len(pts))
        labels.extend([PART_RHAND if part == PART_LHAND else part] * len(pts))
        add_faces(ls, n)
        add_faces(rs, n, flip=True)
        mirror.extend(range(rs, rs + len(pts)))
        mirror.extend(range(ls, ls + len(pts)))

    # self-mirrored filler points on the torso midline
    nfill = nsurf - (len(verts))
    for k in range(nfill):
        y = -0.05 - 0.4 * (k + 0.5) / max(nfill, 1)
        verts.append(np.array([0.0, y, 0.14 if k % 2 == 0 else -0.14]))
        labels.append(PART_BODY)
        mirror.append(len(verts) - 1)

    # joint anchors: two vertices per joint whose mean is the joint
    anchor_start = len(verts)
    for k in range(J):
        verts.append(rest[k] + [0.012, 0.0, 0.0])
        verts.append(rest[k] - [0.012, 0.0, 0.0])
        labels.extend([PART_BODY, PART_BODY])
    for k in range(J):
        m = jmirror[k]
        mirror.extend([anchor_start + 2 * m + 1, anchor_start + 2 * m])

    verts = np.array(verts)
    labels = np.array(labels)
    mirror = np.array(mirror)
    assert verts.shape == (V, 3) and len(mirror) == V
    # anchors take the label of the nearest surface vertex
    surf = verts[:anchor_start]
    for v in range(anchor_start, V):
        labels[v] = labels[np.argmin(np.linalg.norm(surf - verts[v], axis=1))]

    # skinning weights from bone distances, top-4, then mirror-symmetrized
    sigma = 0.05
    W = np.zeros((V, J))
    for a, b, own in bones:
        W[:, own] = np.maximum(W[:, own], np.exp(-(_seg_dist(verts, a, b) / sigma) ** 2))
    W += 1e-12
    self_m = mirror == np.arange(V)
    W[np.ix_(self_m, jmirror != np.arange(J))] = 0.0  # midline points follow midline joints
    top = np.argsort(-W, axis=1, kind="stable")[:, 4:]
    np.put_along_axis(W, top, 0.0, axis=1)
    W /= W.sum(axis=1, keepdims=True)
    rep = np.minimum(np.arange(V), mirror) if symmetric else np.arange(V)
    W = np.where((np.arange(V) == rep)[:, None], W, W[mirror][:, jmirror])
    if np.any(self_m):
        Ws = 0.5 * (W[self_m] + W[self_m][:, jmirror])
        W[self_m] = Ws / Ws.sum(axis=1, keepdims=True)

    # joint regressor: the anchor pair of each joint
    Jreg = np.zeros((J, V))
    for k in range(J):
        Jreg[k, anchor_start + 2 * k] = 0.5
        Jreg[k, anchor_start + 2 * k + 1] = 0.5

    def symmetrize(field):
        return 0.5 * (field + field[mirror] * M[None, :, None])

    # shape: height, width, girth, then random smooth fields
    dirs = np.zeros((V, 3, B))
    dirs[:, 1, 0] = 0.06 * verts[:, 1]
    if B > 1:
        dirs[:, 0, 1] = 0.08 * verts[:, 0]
    if B > 2:
        dirs[:, 2, 2] = 0.15 * verts[:, 2]
    for k in range(3, B):
        freq = rng.normal(scale=3.0, size=(3, 3))
        amp = rng.normal(scale=0.012, size=(3,))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        dirs[:, :, k] = amp * np.sin(verts @ freq + phase)
    shape_dirs = symmetrize(dirs)

    face = (labels == PART_FACE).astype(np.float64)
    head_c = np.array(tips["head"]) * 0.5 + full_pos[names.index("head")] * 0.5
    edirs = np.zeros((V, 3, E))
    for k in range(E):
        freq = rng.normal(scale=12.0, size=(3, 3))
        amp = rng.normal(scale=0.01, size=(3,))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        edirs[:, :, k] = face[:, None] * amp * np.sin((verts - head_c) @ freq + phase)
    expr_dirs = symmetrize(edirs)

    levels = _tree_levels(parents)
    return BodyModel(
        template_vertices=verts, parents=parents, rest_joints=Jreg @ verts, skin_weights=W,
        shape_dirs=shape_dirs, expr_dirs=expr_dirs, joint_regressor=Jreg,
        primary_joint=jnames.index("head"), root_joint=jnames.index("pelvis"),
        part_labels=labels, joint_names=jnames, faces=np.array(faces, dtype=np.int64),
        vertex_mirror=mirror, joint_mirror=jmirror, seed=seed, levels=levels,
    )


def mean_params(model: BodyModel) -> BodyParams:
    """Rest pose, zero shape and expression."""
    return BodyParams(np.zeros((model.num_joints, 3)), np.zeros(model.num_betas),
                      np.zeros(model.num_expr))


# ------------------------------------------------------------- rotation ops

def _fn_a(q):
    """sin(s)/s with s = sqrt(q), and its derivative in q."""
    small = q < 1e-2
    s = np.sqrt(np.where(small, 1.0, q))
    val = np.where(small, 1 - q / 6 + q ** 2 / 120 - q ** 3 / 5040, np.sin(s) / s)
    der = np.where(small, -1 / 6 + q / 60 - q ** 2 / 1680,
                   (s * np.cos(s) - np.sin(s)) / (2 * s ** 3))
    return val, der


def _fn_b(q):
    """(1 - cos s)/s^2 with s = sqrt(q), and its derivative in q."""
    small = q < 1e-2
    s = np.sqrt(np.where(small, 1.0, q))
    val = np.where(small, 0.5 - q / 24 + q ** 2 / 720 - q ** 3 / 40320, (1 - np.cos(s)) / s ** 2)
    der = np.where(small, -1 / 24 + q / 360 - q ** 2 / 13440,
                   (s * np.sin(s) - 2 * (1 - np.cos(s))) / (2 * s ** 4))
    return val, der


def _fn_g(c):
    """theta / (2 sin theta) for cos(theta) = c, and its derivative in c."""
    c = np.clip(c, -1 + 1e-6, 1.0)
    x = 1.0 - c
    small = x < 1e-3
    cs = np.where(small, 0.0, c)
    s = np.sqrt(1 - cs * cs)
    th = np.arccos(cs)
    val = np.where(small, 0.5 + x / 6 + x ** 2 / 15 + x ** 3 / 35 + 4 * x ** 4 / 315, th / (2 * s))
    der = np.where(small, -(1 / 6 + 2 * x / 15 + 3 * x ** 2 / 35 + 16 * x ** 3 / 315),
                   (-1 + th * cs / s) / (2 * s * s))
    return val, der


_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1, 1   # K01 = -z, K02 = y
_SKEW[2, 3], _SKEW[0, 5] = 1, -1   # K10 = z, K12 = -x
_SKEW[1, 6], _SKEW[0, 7] = -1, 1   # K20 = -y, K21 = x


def axis_angle_to_matrix_t(aa) -> Tensor:
    """Differentiable Rodrigues; smooth through the zero rotation."""
    aa = T.as_tensor(aa)
    q = T.reduce_sum(T.square(aa), axis=-1, keepdims=True)
    av, ad = _fn_a(q.data)
    bv, bd = _fn_b(q.data)
    A = T.reshape(T.unary(q, av, ad, "rod_a"), aa.shape[:-1] + (1, 1))
    Bc = T.reshape(T.unary(q, bv, bd, "rod_b"), aa.shape[:-1] + (1, 1))
    K = T.reshape(T.matmul(aa, _SKEW), aa.shape[:-1] + (3, 3))
    return T.add(np.eye(3), A * K + Bc * T.matmul(K, K))


def sixd_to_matrix_t(v, eps=1e-8) -> Tensor:
    """Differentiable Gram-Schmidt 6D -> rotation; ``eps`` keeps norms away from 0."""
    v = T.as_tensor(v)
    a1 = T.getitem(v, (Ellipsis, slice(0, 3)))
    a2 = T.getitem(v, (Ellipsis, slice(3, 6)))
    b1 = a1 / T.sqrt(T.reduce_sum(T.square(a1), -1, keepdims=True) + eps)
    r = a2 - T.reduce_sum(b1 * a2, -1, keepdims=True) * b1
    b2 = r / T.sqrt(T.reduce_sum(T.square(r), -1, keepdims=True) + eps)
    b3 = T.cross(b1, b2)
    return T.stack([b1, b2, b3], axis=-1)


def matrix_to_axis_angle_t(R) -> Tensor:
    """Differentiable log map; valid away from theta = pi."""
    R = T.as_tensor(R)
    flat = T.reshape(R, R.shape[:-2] + (9,))
    w = T.take(flat, [7, 2, 3], -1) - T.take(flat, [5, 6, 1], -1)
    tr = T.reduce_sum(T.take(flat, [0, 4, 8], -1), -1, keepdims=True)
    cos = (tr - 1.0) * 0.5
    gv, gd = _fn_g(cos.data)
    return w * T.unary(cos, gv, gd, "log_ratio")


# ---------------------------------------------------------------- forward

def forward_t(model: BodyModel, rotmats, betas, expr):
    """Batched differentiable forward.

    rotmats (N, J, 3, 3), betas (N, B), expr (N, E) -> vertices (N, V, 3),
    joints (N, J, 3), both translated so the primary joint is at the origin.
    """
    rotmats, betas, expr = T.as_tensor(rotmats), T.as_tensor(betas), T.as_tensor(expr)
    V, J = model.num_vertices, model.num_joints
    n = rotmats.shape[0]
    if rotmats.shape[1:] != (J, 3, 3) or betas.shape[1:] != (model.num_betas,) \
            or expr.shape[1:] != (model.num_expr,):
        raise BodyModelError(
            f"parameter shapes {rotmats.shape}, {betas.shape}, {expr.shape} do not match "
            f"model J={J} B={model.num_betas} E={model.num_expr}")
    sd = model.shape_dirs.reshape(V * 3, -1).T
    ed = model.expr_dirs.reshape(V * 3, -1).T
    offs = T.matmul(betas, sd) + T.matmul(expr, ed)
    shaped = T.reshape(offs, (n, V, 3)) + model.template_vertices
    rest = T.matmul(model.joint_regressor, shaped)  # (n, J, 3)

    levels, par_pos, inv = model.levels
    GR = [T.take(rotmats, levels[0], 1)]
    Gp = [T.take(rest, levels[0], 1)]
    for lv, pp in zip(levels[1:], par_pos[1:]):
        Rp = T.take(GR[-1], pp, 1)
        rel = T.take(rest, lv, 1) - T.take(rest, model.parents[lv], 1)
        GR.append(T.matmul(Rp, T.take(rotmats, lv, 1)))
        Gp.append(T.take(Gp[-1], pp, 1) + T.reshape(
            T.matmul(Rp, T.reshape(rel, (n, len(lv), 3, 1))), (n, len(lv), 3)))
    GR = T.take(T.concat(GR, 1), inv, 1)
    joints = T.take(T.concat(Gp, 1), inv, 1)

    bvec = joints - T.reshape(T.matmul(GR, T.reshape(rest, (n, J, 3, 1))), (n, J, 3))
    A = T.concat([T.reshape(GR, (n, J, 9)), bvec], axis=-1)  # (n, J, 12)
    Tv = T.matmul(model.skin_weights, A)  # (n, V, 12)
    Rv = T.reshape(T.getitem(Tv, (Ellipsis, slice(0, 9))), (n, V, 3, 3))
    tv = T.getitem(Tv, (Ellipsis, slice(9, 12)))
    posed = T.reshape(T.matmul(Rv, T.reshape(shaped, (n, V, 3, 1))), (n, V, 3)) + tv

    head = T.getitem(joints, (slice(None), slice(model.primary_joint, model.primary_joint + 1)))
    return posed - head, joints - head


def forward_batch(model: BodyModel, pose, shape, expression):
    """numpy batched forward on axis-angle poses (N, J, 3)."""
    with T.no_grad():
        R = geometry.axis_angle_to_matrix(np.asarray(pose, dtype=np.float64))
        v, j = forward_t(model, R, np.asarray(shape, dtype=np.float64),
                         np.asarray(expression, dtype=np.float64))
    return v.data, j.data


def forward(model: BodyModel, params: BodyParams):
    """Posed, head-centered (vertices (V,3), joints (J,3))."""
    p = params
    if p.pose.shape != (model.num_joints, 3):
        raise BodyModelError(f"pose shape {p.pose.shape} != ({model.num_joints}, 3)")
    if np.shape(p.shape) != (model.num_betas,) or np.shape(p.expression) != (model.num_expr,):
        raise BodyModelError(f"shape/expression sizes {np.shape(p.shape)}, "
                             f"{np.shape(p.expression)} != ({model.num_betas},), ({model.num_expr},)")
    v, j = forward_batch(model, p.pose[None], np.asarray(p.shape)[None], np.asarray(p.expression)[None])
    return v[0], j[0]


def place(vertices, t):
    return np.asarray(vertices) + np.asarray(t, dtype=np.float64)


def flip_params(model: BodyModel, params: BodyParams) -> BodyParams:
    """Parameters of the left/right mirrored body (x -> -x)."""
    pose = params.pose[model.joint_mirror] * np.array([1.0, -1.0, -1.0])
    return BodyParams(pose, params.shape.copy(), params.expression.copy())


def mirror_vertices(model: BodyModel, vertices):
    """Mirror a (…, V, 3) vertex array across x = 0 with the vertex relabeling."""
    v = np.asarray(vertices)
    return np.take(v, model.vertex_mirror, axis=-2) * np.array([-1.0, 1.0, 1.0])


# ------------------------------------------------------------------ export

def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for x, y, z in np.asarray(vertices):
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in np.asarray(faces):
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def to_blob(model: BodyModel) -> bytes:
    """Header (V, J, B, E) as little-endian int32, then arrays as <f4 in declaration order."""
    head = struct.pack("<4i", model.num_vertices, model.num_joints, model.num_betas, model.num_expr)
    arrays = [model.template_vertices, model.parents, model.rest_joints, model.skin_weights,
              model.shape_dirs, model.expr_dirs, model.joint_regressor]
    return head + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def from_blob(blob: bytes) -> dict:
    """Parse a model blob back into its arrays (float32 precision)."""
    if len(blob) < 16:
        raise BodyModelError("model blob truncated in header")
    V, J, B, E = struct.unpack("<4i", blob[:16])
    shapes = [("template_vertices", (V, 3)), ("parents", (J,)), ("rest_joints", (J, 3)),
              ("skin_weights", (V, J)), ("shape_dirs", (V, 3, B)), ("expr_dirs", (V, 3, E)),
              ("joint_regressor", (J, V))]
    out, off = {}, 16
    for name, shp in shapes:
        n = int(np.prod(shp)) * 4
        if off + n > len(blob):
            raise BodyModelError(f"model blob truncated in {name}")
        out[name] = np.frombuffer(blob[off:off + n], dtype="<f4").reshape(shp).astype(np.float64)
        off += n
    out["parents"] = out["parents"].astype(int)
    return out
