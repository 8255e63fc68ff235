from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.utils.errors import FormatError, InputOutputError, ShapeError

UNIT_NORM_TOL = 1e-9
HEADER_KEY = 'descriptor_dim'


@dataclass(frozen=True, eq=False)
class Keypoint:
    """3D keypoint: position in meters, detection score, unit descriptor, source cell."""
    position: np.ndarray
    score: float
    descriptor: np.ndarray
    cell: tuple = (-1, -1)

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(-1)
        desc = np.array(self.descriptor, dtype=np.float64).reshape(-1)
        if pos.shape != (3,):
            raise ShapeError(f"keypoint position must be 3 values, got {pos.shape}")
        if abs(np.linalg.norm(desc) - 1.0) > UNIT_NORM_TOL:
            raise ShapeError("keypoint descriptor must have unit norm")
        pos.setflags(write=False)
        desc.setflags(write=False)
        object.__setattr__(self, 'position', pos)
        object.__setattr__(self, 'descriptor', desc)
        object.__setattr__(self, 'score', float(self.score))

    def __repr__(self):
        return f'<Keypoint {np.round(self.position, 3).tolist()} score={self.score:.4f}>'

    def to_dict(self):
        return {
            'position': self.position.tolist(),
            'score': self.score,
            'descriptor': self.descriptor.tolist()
        }


def keypoint_arrays(keypoints):
    """Stack positions (N, 3) and descriptors (N, D) of a keypoint list."""
    if not keypoints:
        return np.zeros((0, 3)), np.zeros((0, 0))
    return (np.stack([kp.position for kp in keypoints]),
            np.stack([kp.descriptor for kp in keypoints]))


def format_keypoints(keypoints, descriptor_dim=None):
    """Header `descriptor_dim,<D>` then one `x,y,z,score,d1..dD` line per keypoint."""
    if descriptor_dim is None:
        descriptor_dim = keypoints[0].descriptor.size if keypoints else 0
    lines = [f'{HEADER_KEY},{descriptor_dim}']
    for kp in keypoints:
        values = [*kp.position, kp.score, *kp.descriptor]
        lines.append(','.join(repr(float(v)) for v in values))
    return '\n'.join(lines) + '\n'


def write_keypoints(keypoints, path, descriptor_dim=None):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_keypoints(keypoints, descriptor_dim))
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e


def read_keypoints(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
    if not lines or not lines[0].startswith(HEADER_KEY + ','):
        raise FormatError(f"{path}: missing '{HEADER_KEY}' header")
    try:
        dim = int(lines[0].split(',')[1])
        rows = [[float(v) for v in line.split(',')] for line in lines[1:] if line.strip()]
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    keypoints = []
    for row in rows:
        if len(row) != 4 + dim:
            raise FormatError(f"{path}: expected {4 + dim} values per keypoint, got {len(row)}")
        keypoints.append(Keypoint(row[:3], row[3], row[4:]))
    return keypoints
