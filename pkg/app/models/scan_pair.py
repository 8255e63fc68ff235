from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from app.models.geometry import PointCloud, RigidTransform, load_kitti_bin
from app.utils.errors import EmptyInputError, FormatError, InputOutputError

GROUND, WALL, POLE, CLUTTER = 0, 1, 2, 3
STRUCTURE_NAMES = {GROUND: 'ground', WALL: 'wall', POLE: 'pole', CLUTTER: 'clutter'}


@dataclass(frozen=True, eq=False)
class Scene:
    """World-frame cloud with one structure label per point."""
    cloud: PointCloud
    labels: np.ndarray
    extent: tuple

    def __post_init__(self):
        if self.cloud.is_empty:
            raise EmptyInputError("a scene needs at least one point")
        labels = np.array(self.labels, dtype=np.int8).reshape(-1)
        if labels.size != len(self.cloud):
            raise FormatError("scene labels must match the point count")
        labels.setflags(write=False)
        object.__setattr__(self, 'labels', labels)

    def __repr__(self):
        return f'<Scene {len(self.cloud)} points>'

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))


@dataclass(frozen=True, eq=False)
class ScanPair:
    """
    Two scans and the ground truth mapping Q-frame points into P's frame.

    Clouds are either given directly or loaded lazily from .bin paths.
    """
    gt: RigidTransform
    distance: float
    path_p: Path = None
    path_q: Path = None
    points_p: PointCloud = None
    points_q: PointCloud = None

    @cached_property
    def cloud_p(self):
        return self.points_p if self.points_p is not None else load_kitti_bin(self.path_p)

    @cached_property
    def cloud_q(self):
        return self.points_q if self.points_q is not None else load_kitti_bin(self.path_q)

    def swapped(self):
        """The same pair seen from Q: clouds exchanged, gt inverted."""
        return ScanPair(self.gt.inverse(), self.distance, self.path_q, self.path_p,
                        self.points_q, self.points_p)

    def __repr__(self):
        return f'<ScanPair distance={self.distance:.2f}>'


def format_manifest_line(path_p, path_q, gt, distance):
    values = ','.join(repr(float(v)) for v in gt.to_row_major())
    return f'{path_p},{path_q},{values},{float(distance)!r}'


def parse_manifest_line(line, base_dir=None):
    fields = line.strip().split(',')
    if len(fields) != 15:
        raise FormatError(f"manifest line needs 15 fields, got {len(fields)}")
    try:
        values = [float(v) for v in fields[2:]]
    except ValueError as e:
        raise FormatError(f"manifest line: {e}") from e
    base = Path(base_dir) if base_dir is not None else Path('.')
    path_p, path_q = (base / fields[0], base / fields[1])
    gt = RigidTransform.from_row_major(values[:12])
    return ScanPair(gt, values[12], path_p=path_p, path_q=path_q)


def write_manifest(lines, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(''.join(line + '\n' for line in lines))
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e


def read_manifest(path):
    """Parse a pair manifest; relative cloud paths resolve against its directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            pairs.append(parse_manifest_line(line, path.parent))
        except FormatError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return pairs
