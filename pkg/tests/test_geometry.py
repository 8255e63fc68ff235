import struct

import numpy as np
import pytest

from app.models.geometry import (PointCloud, RigidTransform, apply_transform, load_kitti_bin, load_poses,
                                 write_kitti_bin, write_poses)
from app.utils.errors import FormatError, InputOutputError, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_load_empty_file(tmp_path):
    """An empty scan file reads as a cloud with no points."""
    path = tmp_path / 'empty.bin'
    path.write_bytes(b'')
    cloud = load_kitti_bin(path)
    assert len(cloud) == 0
    assert cloud.points.shape == (0, 3)


def test_load_two_records(tmp_path):
    """Two little-endian records decode to their xyz, reflectance dropped."""
    path = tmp_path / 'two.bin'
    path.write_bytes(struct.pack('<8f', 1, 2, 3, 0.5, 4, 5, 6, 0.1))
    cloud = load_kitti_bin(path)
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])


def test_load_rejects_partial_record(tmp_path):
    """A length that is not a multiple of 16 bytes is a format error."""
    path = tmp_path / 'bad.bin'
    path.write_bytes(b'\x00' * 17)
    with pytest.raises(FormatError):
        load_kitti_bin(path)


def test_load_missing_file(tmp_path):
    """An unreadable path surfaces as an I/O error carrying the path."""
    with pytest.raises(InputOutputError) as excinfo:
        load_kitti_bin(tmp_path / 'nope.bin')
    assert 'nope.bin' in excinfo.value.path


def test_write_then_load_is_bit_exact(tmp_path, rng):
    """Coordinates representable in float32 survive a write and a read unchanged."""
    points = rng.normal(scale=10.0, size=(50, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / 'scan.bin'
    write_kitti_bin(PointCloud(points), path)
    assert path.stat().st_size == 50 * 16
    np.testing.assert_array_equal(load_kitti_bin(path).points, points)


def test_cloud_rejects_bad_shape_and_values():
    """Clouds must be (N, 3) and finite."""
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(FormatError):
        PointCloud([[0.0, np.nan, 1.0]])


def test_identity_transform_keeps_cloud(rng):
    """The identity leaves every point where it was."""
    cloud = PointCloud(rng.normal(size=(20, 3)))
    np.testing.assert_array_equal(apply_transform(cloud, RigidTransform.identity()).points, cloud.points)


def test_quarter_turn_about_z():
    """(1, 0, 0) rotated 90 degrees about z lands on (0, 1, 0)."""
    moved = apply_transform(PointCloud([[1.0, 0.0, 0.0]]), RigidTransform.from_yaw(np.pi / 2))
    np.testing.assert_allclose(moved.points, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_transform_then_inverse(rng):
    """Applying a transform and then its inverse restores the cloud."""
    cloud = PointCloud(rng.uniform(-30, 30, size=(100, 3)))
    t = RigidTransform.random(rng)
    back = apply_transform(apply_transform(cloud, t), t.inverse())
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)


def test_compose_applies_right_operand_first(rng):
    """a.compose(b) maps p to a(b(p))."""
    a, b = RigidTransform.random(rng), RigidTransform.random(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-9)


def test_rotation_must_be_orthonormal():
    """A scaled rotation is rejected unless it is projected back onto SO(3)."""
    matrix = np.hstack([1.01 * np.eye(3), np.zeros((3, 1))])
    with pytest.raises(ShapeError):
        RigidTransform.from_matrix(matrix)
    fixed = RigidTransform.from_matrix(matrix, orthonormalize=True)
    np.testing.assert_allclose(fixed.rotation, np.eye(3), atol=1e-12)


def test_poses_round_trip(tmp_path, rng):
    """Poses written with repr() read back equal."""
    poses = [RigidTransform.random(rng) for _ in range(4)]
    path = tmp_path / 'poses.txt'
    write_poses(poses, path)
    loaded = load_poses(path)
    assert len(loaded) == 4
    for a, b in zip(poses, loaded):
        np.testing.assert_allclose(b.as_matrix(), a.as_matrix(), atol=1e-12)


def test_pose_line_with_wrong_count(tmp_path):
    """A pose line without 12 values names its line number."""
    path = tmp_path / 'poses.txt'
    path.write_text('1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n')
    with pytest.raises(FormatError, match=':2:'):
        load_poses(path)
