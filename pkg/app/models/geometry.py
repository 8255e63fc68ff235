import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from app.utils.errors import FormatError, InputOutputError, ShapeError

logger = logging.getLogger(__name__)

KITTI_RECORD_BYTES = 16
ORTHONORMAL_TOL = 1e-9


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) array of points in meters."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"point cloud must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud contains non-finite coordinates")
        object.__setattr__(self, 'points', _frozen(pts))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)))

    def __len__(self):
        return self.points.shape[0]

    def __repr__(self):
        return f'<PointCloud {len(self)} points>'

    @property
    def is_empty(self):
        return len(self) == 0

    def merge(self, other):
        """Concatenate two clouds, self first."""
        return PointCloud(np.vstack([self.points, other.points]))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, det 1) and translation (meters). Maps p to R p + t."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ShapeError("rigid transform needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise FormatError("rigid transform contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHONORMAL_TOL \
                or abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ShapeError("rotation is not orthonormal with det 1")
        object.__setattr__(self, 'rotation', _frozen(rot))
        object.__setattr__(self, 'translation', _frozen(trans))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, orthonormalize=False):
        """Build from a 3x4 or 4x4 matrix. Optionally project the rotation onto SO(3)."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ShapeError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        rot = m[:3, :3]
        if orthonormalize:
            u, _, vt = np.linalg.svd(rot)
            d = np.sign(np.linalg.det(u @ vt))
            rot = u @ np.diag([1.0, 1.0, d]) @ vt
        return cls(rot, m[:3, 3])

    @classmethod
    def from_row_major(cls, values, orthonormalize=False):
        """Build from 12 row-major values of the 3x4 matrix."""
        vals = np.asarray(values, dtype=np.float64).reshape(-1)
        if vals.size != 12:
            raise FormatError(f"expected 12 values for a 3x4 transform, got {vals.size}")
        return cls.from_matrix(vals.reshape(3, 4), orthonormalize=orthonormalize)

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        """Rotation about +z by `yaw` radians followed by a translation."""
        return cls(Rotation.from_euler('z', yaw).as_matrix(), translation)

    @classmethod
    def random(cls, rng, max_translation=10.0):
        """Uniformly random rotation, translation uniform in a cube."""
        rot = Rotation.random(random_state=rng).as_matrix()
        trans = rng.uniform(-max_translation, max_translation, size=3)
        return cls(rot, trans)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_row_major(self):
        return self.as_matrix()[:3, :].reshape(-1)

    def compose(self, other):
        """Return self ∘ other: apply `other` first, then `self`."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def apply(self, points):
        """Apply to an (N, 3) array."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def __repr__(self):
        return f'<RigidTransform t={np.round(self.translation, 3).tolist()}>'


def apply_transform(cloud, transform):
    """Return the cloud with p' = R p + t applied to every point, order preserved."""
    return PointCloud(transform.apply(cloud.points))


def load_kitti_bin(path):
    """
    Read a KITTI velodyne scan.

    Args:
        path: file holding little-endian float32 records (x, y, z, reflectance)

    Returns:
        PointCloud: one point per record, reflectance dropped
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
    if len(raw) % KITTI_RECORD_BYTES:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {KITTI_RECORD_BYTES} bytes")
    records = np.frombuffer(raw, dtype='<f4').reshape(-1, 4)
    if not np.all(np.isfinite(records[:, :3])):
        raise FormatError(f"{path}: non-finite coordinates")
    return PointCloud(records[:, :3].astype(np.float64))


def write_kitti_bin(cloud, path):
    """Write a cloud in the KITTI layout with reflectance 0."""
    path = Path(path)
    records = np.zeros((len(cloud), 4), dtype='<f4')
    records[:, :3] = cloud.points
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(records.tobytes())
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e


def load_poses(path):
    """Read one 3x4 row-major pose per line (12 whitespace-separated decimals)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
    poses = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
        if len(values) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
        # Printed poses carry only a few significant digits.
        poses.append(RigidTransform.from_row_major(values, orthonormalize=True))
    return poses


def write_poses(poses, path):
    path = Path(path)
    text = ''.join(' '.join(repr(float(v)) for v in pose.to_row_major()) + '\n' for pose in poses)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
