import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhmr.geometry import (Camera, GeometryError, axis_angle_to_matrix, backproject,
                           focal_from_fov, fourier_encode, matrix_to_axis_angle,
                           matrix_to_sixd, patch_centers, procrustes_align, project, ray_grid,
                           sixd_to_matrix)

CAM448 = Camera(448.0, (224.0, 224.0), (448, 448))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


finite = st.floats(-3, 3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def test_camera_validation_and_json():
    with pytest.raises(GeometryError):
        Camera(0.0, (1, 1), (2, 2))
    with pytest.raises(GeometryError):
        Camera(10.0, (5, 3), (4, 4))
    c = Camera.from_json(CAM448.to_json())
    assert c == CAM448
    assert json.loads(CAM448.to_json()) == {"focal": 448.0, "principal": [224.0, 224.0],
                                           "size": [448, 448]}


def test_fov_focal():
    assert focal_from_fov(60.0, 224) == pytest.approx(112 / np.tan(np.pi / 6), abs=1e-12)
    assert Camera.from_fov(60, 224).principal_point == (112.0, 112.0)


@pytest.mark.parametrize("cam,pt,px", [
    (CAM448, (0, 0, 2), (224, 224)),
    (CAM448, (1, 0, 2), (448, 224)),
    (Camera(224.0, (112.0, 112.0), (224, 224)), (-1, 1, 4), (56, 168)),
])
def test_project_examples(cam, pt, px):
    np.testing.assert_allclose(project(cam, pt), px, atol=1e-12)


def test_backproject_examples():
    np.testing.assert_allclose(backproject(CAM448, (224, 224), 3.0), (0, 0, 3), atol=1e-12)
    np.testing.assert_allclose(backproject(CAM448, (448, 224), 2.0), (1, 0, 2), atol=1e-12)


def test_project_rejects_behind_camera():
    with pytest.raises(GeometryError):
        project(CAM448, (0, 0, 0.0))
    with pytest.raises(GeometryError):
        project(CAM448, [(0, 0, 1.0), (0, 0, -1.0)])
    with pytest.raises(GeometryError):
        backproject(CAM448, (1, 1), 0.0)


def test_round_trip_random_points():
    rng = np.random.default_rng(0)
    z = rng.uniform(0.1, 100, 100)
    pts = np.c_[rng.uniform(-1, 1, (100, 2)) * z[:, None], z]
    back = backproject(CAM448, project(CAM448, pts), z)
    assert np.abs(back - pts).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 100), st.floats(-500, 900), st.floats(-500, 900),
       st.floats(50, 2000))
def test_round_trip_property(z, u, v, f):
    cam = Camera(f, (200.0, 150.0), (400, 300))
    p = backproject(cam, (u, v), z)
    np.testing.assert_allclose(project(cam, p), (u, v), atol=1e-9)
    np.testing.assert_allclose(backproject(cam, project(cam, p), z), p, atol=1e-9)


def test_patch_centers_and_ray_grid():
    c = patch_centers(32, 32, 14)
    np.testing.assert_allclose(c[0, 0], (7, 7))
    np.testing.assert_allclose(c[5, 3], (49, 77))  # row j=5, column i=3
    rays = ray_grid(CAM448, 32, 32, 14)
    assert rays.shape == (32, 32, 2)
    # column 31 / row 16 has center (441, 231)
    np.testing.assert_allclose(rays[16, 31], ((441 - 224) / 448, (231 - 224) / 448))
    with pytest.raises(GeometryError):
        ray_grid(CAM448, 31, 32, 14)


def test_ray_grid_examples():
    # principal point on a patch center -> axis ray
    cam = Camera(448.0, (231.0, 231.0), (448, 448))
    np.testing.assert_allclose(ray_grid(cam, 32, 32, 14)[16, 16], (0, 0), atol=1e-15)
    # f=448, patch center 224 px right of the principal point -> (0.5, 0)
    cam = Camera(448.0, (224.0, 192.0), (896, 896))
    np.testing.assert_allclose(ray_grid(cam, 7, 7, 128)[1, 3], (0.5, 0.0), atol=1e-15)
    base = ray_grid(cam, 7, 7, 128)
    np.testing.assert_allclose(ray_grid(cam.with_focal(896.0), 7, 7, 128), 0.5 * base,
                               atol=1e-15)


def test_fourier_encode():
    assert fourier_encode((0.0, 0.0), 8).shape == (18,)
    assert not fourier_encode((0.0, 0.0), 8).any()
    np.testing.assert_allclose(fourier_encode((0.5, 0.0), 2), [0.5, 1, 0, 0, 0, 0], atol=1e-15)
    assert fourier_encode(np.zeros((4, 5, 2)), 3).shape == (4, 5, 8)
    with pytest.raises(GeometryError):
        fourier_encode((0, 0), 0)


def test_axis_angle_examples():
    np.testing.assert_array_equal(axis_angle_to_matrix(np.zeros(3)), np.eye(3))
    R = axis_angle_to_matrix((0, 0, np.pi / 2))
    np.testing.assert_allclose(R @ (1, 0, 0), (0, 1, 0), atol=1e-15)
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    np.testing.assert_allclose(axis_angle_to_matrix(2 * np.pi * axis), np.eye(3), atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(vec3)
def test_axis_angle_inverse_property(aa):
    R = axis_angle_to_matrix(aa)
    np.testing.assert_allclose(R @ axis_angle_to_matrix(-aa), np.eye(3), atol=1e-9)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(axis_angle_to_matrix(matrix_to_axis_angle(R)), R, atol=1e-7)


def test_log_map_near_pi():
    axis = np.array([0.0, 0.6, 0.8])
    aa = matrix_to_axis_angle(axis_angle_to_matrix(np.pi * axis))
    assert np.linalg.norm(aa) == pytest.approx(np.pi)
    np.testing.assert_allclose(axis_angle_to_matrix(aa), axis_angle_to_matrix(np.pi * axis),
                               atol=1e-9)


def test_sixd_examples():
    np.testing.assert_allclose(sixd_to_matrix((1, 0, 0, 0, 1, 0)), np.eye(3))
    np.testing.assert_allclose(sixd_to_matrix((2, 0, 0, 0, 3, 0)), np.eye(3))
    for bad in [(0, 0, 0, 0, 1, 0), (1, 0, 0, 2, 0, 0), (1, 2, 3, 0, 0, 0)]:
        with pytest.raises(GeometryError):
            sixd_to_matrix(bad)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.01, 100))
def test_sixd_property(v, alpha):
    v = np.array(v)
    a, b = v[:3], v[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * max(1, np.linalg.norm(b)):
        return
    R = sixd_to_matrix(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-6)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(sixd_to_matrix(alpha * v), R, atol=1e-9)
    np.testing.assert_allclose(sixd_to_matrix(matrix_to_sixd(R)), R, atol=1e-12)


def test_procrustes_identity_and_recovery():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 3))
    T = procrustes_align(X, X)
    assert T.scale == pytest.approx(1.0)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, 0, atol=1e-12)
    R0, t0 = random_rotation(rng), rng.normal(size=3)
    T = procrustes_align(X, 2 * X @ R0.T + t0)
    assert T.scale == pytest.approx(2.0, abs=1e-9)
    np.testing.assert_allclose(T.rotation, R0, atol=1e-9)
    np.testing.assert_allclose(T.translation, t0, atol=1e-9)


def test_procrustes_mirror_keeps_proper_rotation():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 3))
    Y = X * np.array([-1.0, 1.0, 1.0])
    T = procrustes_align(X, Y)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-9)
    assert T.scale > 0


def test_procrustes_rank_deficient():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(GeometryError):
        procrustes_align(line, line)
    with pytest.raises(GeometryError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_procrustes_dominates_random_similarities():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(15, 3))
    Y = rng.normal(size=(15, 3))
    best = procrustes_align(X, Y)
    res = ((best.apply(X) - Y) ** 2).sum()
    for _ in range(1000):
        s, R, t = rng.uniform(0.1, 3), random_rotation(rng), rng.normal(size=3)
        assert res <= ((s * X @ R.T + t - Y) ** 2).sum() + 1e-12
