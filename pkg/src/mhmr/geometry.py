"""Pinhole camera, rotation conversions, Fourier ray encoding, Procrustes.

Conventions: radians, meters, pixels. Camera at the origin looking down +z,
image u to the right and v downwards. Patch (i, j) covers pixels
[iP, (i+1)P) x [jP, (j+1)P) and has center ((i+0.5)P, (j+0.5)P).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    focal: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        if not self.focal > 0:
            raise GeometryError(f"focal must be positive, got {self.focal}")
        (pu, pv), (w, h) = self.principal_point, self.image_size
        if not (0 <= pu <= w and 0 <= pv <= h):
            raise GeometryError(f"principal point {(pu, pv)} outside image {(w, h)}")

    @classmethod
    def from_fov(cls, fov_deg, width, height=None):
        height = width if height is None else height
        return cls(focal_from_fov(fov_deg, width), (width / 2.0, height / 2.0), (width, height))

    @property
    def K(self):
        f, (pu, pv) = self.focal, self.principal_point
        return np.array([[f, 0.0, pu], [0.0, f, pv], [0.0, 0.0, 1.0]])

    def with_focal(self, focal):
        return Camera(float(focal), self.principal_point, self.image_size)

    def to_json(self) -> str:
        return json.dumps({"focal": self.focal, "principal": list(self.principal_point),
                           "size": list(self.image_size)})

    @classmethod
    def from_json(cls, text) -> "Camera":
        d = json.loads(text) if isinstance(text, str) else text
        return cls(float(d["focal"]), tuple(float(x) for x in d["principal"]),
                   tuple(int(x) for x in d["size"]))


def focal_from_fov(fov_deg, width):
    """Focal length (pixels) giving horizontal field of view ``fov_deg``."""
    return (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)


def project(camera: Camera, points):
    """Project (..., 3) camera-space points to (..., 2) pixels."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project points with z <= 0 (behind the camera)")
    pu, pv = camera.principal_point
    return np.stack([camera.focal * p[..., 0] / z + pu, camera.focal * p[..., 1] / z + pv], axis=-1)


def backproject(camera: Camera, pixels, depth):
    """Lift (..., 2) pixels at depth (...,) to (..., 3) camera-space points."""
    c = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("depth must be positive")
    pu, pv = camera.principal_point
    x = (c[..., 0] - pu) / camera.focal * d
    y = (c[..., 1] - pv) / camera.focal * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def patch_centers(grid_w, grid_h, patch_size):
    """(grid_h, grid_w, 2) pixel centers, indexed [j, i] (row-major tokens)."""
    u = (np.arange(grid_w) + 0.5) * patch_size
    v = (np.arange(grid_h) + 0.5) * patch_size
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def ray_grid(camera: Camera, grid_w, grid_h, patch_size):
    """First two components of K^-1 [u, v, 1] at every patch center, (grid_h, grid_w, 2)."""
    w, h = camera.image_size
    if grid_w * patch_size != w or grid_h * patch_size != h:
        raise GeometryError(f"grid {grid_w}x{grid_h} @ P={patch_size} does not tile image {w}x{h}")
    c = patch_centers(grid_w, grid_h, patch_size)
    pu, pv = camera.principal_point
    return np.stack([(c[..., 0] - pu) / camera.focal, (c[..., 1] - pv) / camera.focal], axis=-1)


def fourier_encode(coords, bands: int):
    """Per coordinate x: [x, sin(2^0 pi x), ..., sin(2^(F-1) pi x)]; blocks
    concatenated, so a 2-vector maps to length 2(F+1). Works on (..., 2)."""
    if bands < 1:
        raise GeometryError("need at least one frequency band")
    x = np.asarray(coords, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(bands)
    blocks = []
    for k in range(x.shape[-1]):
        xk = x[..., k:k + 1]
        blocks.append(xk)
        blocks.append(np.sin(xk * freqs))
    return np.concatenate(blocks, axis=-1)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def axis_angle_to_matrix(aa):
    """Rodrigues formula on (..., 3) axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    K = skew(aa)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    """Inverse Rodrigues on (..., 3, 3); angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], -1)
    s = np.linalg.norm(w, axis=-1) / 2.0
    theta = np.arctan2(s, cos)  # arccos loses half the digits near +-1
    out = np.empty(R.shape[:-2] + (3,))
    gen = s > 1e-6
    out[gen] = (theta[gen] / (2 * s[gen]))[..., None] * w[gen]
    near0 = (~gen) & (cos > 0)
    out[near0] = 0.5 * w[near0]
    nearpi = (~gen) & (cos <= 0)
    if np.any(nearpi):
        # R = 2 a a^T - I at theta = pi; the skew part fixes the sign just below pi
        B = (R[nearpi] + np.eye(3)) / 2.0
        diag = np.clip(np.diagonal(B, axis1=-2, axis2=-1), 0, None)
        k = np.argmax(diag, axis=-1)
        n = np.arange(len(k))
        ax = B[n, k] / np.sqrt(diag[n, k])[:, None]
        ax /= np.linalg.norm(ax, axis=-1, keepdims=True)
        flip = np.sum(ax * w[nearpi], -1) < 0
        ax[flip] *= -1
        out[nearpi] = ax * theta[nearpi][:, None]
    return out


def sixd_to_matrix(v):
    """Gram-Schmidt on two 3-vectors (..., 6) -> rotation with those as first two columns."""
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., :3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-12):
        raise GeometryError("degenerate 6D rotation: first vector is zero")
    b1 = a1 / n1
    r = a2 - np.sum(b1 * a2, -1, keepdims=True) * b1
    n2 = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(n2 < 1e-12 * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise GeometryError("degenerate 6D rotation: vectors are parallel or second is zero")
    b2 = r / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_sixd(R):
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(source, target) -> SimilarityTransform:
    """Similarity (s, R, t) minimizing sum ||s R x_i + t - y_i||^2 with det R = +1 (Umeyama)."""
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise GeometryError(f"expected matching (N,3) arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise GeometryError("procrustes needs at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = (Xc ** 2).sum()
    if np.linalg.matrix_rank(Xc, tol=1e-10 * max(1.0, np.sqrt(var_x))) < 2:
        raise GeometryError("procrustes source is rank deficient (collinear or coincident points)")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_x)
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)
