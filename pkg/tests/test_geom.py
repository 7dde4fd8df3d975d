import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarpsc.geom import (
    CameraModel,
    PointCloud,
    RigidTransform,
    VoxelGridSpec,
    compose,
    project_points,
    voxel_index,
    voxel_indices,
)

SPEC = VoxelGridSpec()


def random_transform(seed: int) -> RigidTransform:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return RigidTransform(q, rng.normal(scale=10, size=3))


def simple_camera(fx=100.0, fy=110.0, cx=64.0, cy=48.0, size=(128, 96)):
    k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1]])
    return CameraModel(k, RigidTransform.identity(), size)


# -- transforms ---------------------------------------------------------------


def test_compose_with_identity_is_noop():
    t = random_transform(0)
    assert compose(RigidTransform.identity(), t).allclose(t)
    assert compose(t, RigidTransform.identity()).allclose(t)


def test_compose_with_inverse_is_identity():
    t = random_transform(1)
    assert compose(t, t.inverse()).allclose(RigidTransform.identity(), atol=1e-9)


def test_two_quarter_turns_flip_x():
    r = RigidTransform.rot_z(np.pi / 2)
    out = compose(r, r).apply(np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out, [[-1.0, 0.0, 0.0]], atol=1e-12)


def test_matmul_matches_compose():
    a, b = random_transform(2), random_transform(3)
    assert (a @ b).allclose(compose(a, b))


def test_rejects_reflection_and_garbage():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2, np.zeros(3))


def test_small_drift_is_reorthonormalized():
    r = RigidTransform.rot_z(0.3).rotation + 1e-8
    t = RigidTransform(r, np.zeros(3))
    err = np.abs(t.rotation.T @ t.rotation - np.eye(3)).max()
    assert err < 1e-12


def test_from_matrix_round_trip():
    t = random_transform(4)
    assert RigidTransform.from_matrix(t.matrix()[:3]).allclose(t)
    assert RigidTransform.from_matrix(t.matrix()).allclose(t)


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_compose_is_associative_and_applies_in_order(s1, s2, s3):
    a, b, c = random_transform(s1), random_transform(s2), random_transform(s3)
    p = np.random.default_rng(s1 + s2).normal(size=(5, 3))
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), atol=1e-9)
    r = compose(a, b).rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9


# -- projection ---------------------------------------------------------------


def test_point_on_axis_hits_principal_point():
    cam = simple_camera()
    idx, u, v = project_points(PointCloud(np.array([[0.0, 0.0, 7.5, 0.0]])), cam)
    assert idx.tolist() == [0] and (u[0], v[0]) == (64, 48)


def test_points_behind_camera_are_dropped():
    cam = simple_camera()
    idx, _, _ = project_points(PointCloud(np.array([[0, 0, 0.0, 0], [0, 0, -3.0, 0], [0, 0, 2.0, 0]])), cam)
    assert idx.tolist() == [2]


def test_projection_matches_hand_arithmetic():
    cam = simple_camera()
    pts = np.array([[1.0, 0.5, 4.0], [-2.0, -1.0, 10.0], [0.3, 0.2, 2.0]])
    idx, u, v = project_points(PointCloud(pts), cam)
    # u = fx x / z + cx, v = fy y / z + cy
    expected_u = [int(np.floor(100 * 1.0 / 4 + 64)), int(np.floor(100 * -2.0 / 10 + 64)), int(np.floor(100 * 0.3 / 2 + 64))]
    expected_v = [int(np.floor(110 * 0.5 / 4 + 48)), int(np.floor(110 * -1.0 / 10 + 48)), int(np.floor(110 * 0.2 / 2 + 48))]
    assert idx.tolist() == [0, 1, 2]
    assert u.tolist() == expected_u == [89, 44, 79]
    assert v.tolist() == expected_v == [61, 37, 59]


def test_projection_stays_inside_image():
    cam = simple_camera()
    pts = np.random.default_rng(0).uniform(-20, 20, size=(2000, 3))
    idx, u, v = project_points(PointCloud(pts), cam)
    assert np.all((u >= 0) & (u < 128) & (v >= 0) & (v < 96))
    assert np.all(pts[idx, 2] > 0)


@given(st.integers(0, 10_000))
def test_projection_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    cam = simple_camera()
    pts = rng.uniform(-5, 5, size=(50, 3)) + [0, 0, 5]
    perm = rng.permutation(50)
    i1, u1, v1 = project_points(PointCloud(pts), cam)
    i2, u2, v2 = project_points(PointCloud(pts[perm]), cam)
    a = {int(i): (int(x), int(y)) for i, x, y in zip(i1, u1, v1)}
    b = {int(perm[i]): (int(x), int(y)) for i, x, y in zip(i2, u2, v2)}
    assert a == b


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(np.diag([0.0, 1.0, 1.0]), RigidTransform.identity(), (10, 10))
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), RigidTransform.identity(), (0, 10))


# -- voxel addressing --------------------------------------------------------


def test_origin_maps_to_first_cell():
    assert voxel_index(np.array(SPEC.origin), SPEC) == (0, 0, 0)


def test_upper_boundary_is_excluded():
    assert voxel_index(np.array(SPEC.origin) + [51.2, 51.2, 6.4], SPEC) is None
    assert voxel_index(np.array(SPEC.origin) + [51.2, 0, 0], SPEC) is None


def test_floor_arithmetic_on_default_spec():
    assert voxel_index(np.array([10.05, 0.0, 0.0]), SPEC) == (50, 128, 10)


def test_spec_defaults_and_extent():
    assert SPEC.origin == (0.0, -25.6, -2.0)
    assert SPEC.voxel_size == 0.2
    assert SPEC.dims == (256, 256, 32)
    np.testing.assert_allclose(SPEC.extent, [51.2, 51.2, 6.4])
    with pytest.raises(ValueError):
        VoxelGridSpec(voxel_size=0.0)
    with pytest.raises(ValueError):
        VoxelGridSpec(dims=(0, 1, 1))


@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 31))
def test_voxel_center_round_trip(x, y, z):
    idx = np.array([x, y, z])
    assert voxel_index(SPEC.voxel_center(idx), SPEC) == (x, y, z)
    lin = SPEC.to_linear(idx)
    assert lin[0] == x + 256 * (y + 256 * z)
    assert SPEC.from_linear(lin)[0].tolist() == [x, y, z]


def test_vectorized_indices_mask_out_of_range():
    pts = np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [51.19, 25.59, 4.39]])
    idx, inside = voxel_indices(pts, SPEC)
    assert inside.tolist() == [True, False, True]
    assert idx.tolist() == [[0, 128, 10], [255, 255, 31]]


def test_point_cloud_validation():
    assert PointCloud(np.zeros((0,))).points.shape == (0, 4)
    assert PointCloud(np.ones((2, 3))).points.shape == (2, 4)
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0, 0]]))
