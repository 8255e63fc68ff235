import logging
from dataclasses import dataclass, field

import numpy as np

from app.utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BevConfig:
    """Metric extent (xmin, xmax, ymin, ymax, zmin, zmax), cell counts (H, W, C) and window s.

    Rows (i) run along x, columns (j) along y, channels (k) along z.
    """
    extent: tuple
    resolution: tuple
    window: int = 3

    def __post_init__(self):
        extent = tuple(float(v) for v in self.extent)
        resolution = tuple(int(v) for v in self.resolution)
        if len(extent) != 6 or len(resolution) != 3:
            raise ConfigError("extent needs 6 values and resolution 3 values")
        for lo, hi in zip(extent[0::2], extent[1::2]):
            if not hi > lo:
                raise ConfigError(f"extent max must exceed min, got [{lo}, {hi}]")
        if min(resolution) < 1:
            raise ConfigError("H, W and C must be at least 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"neighbourhood window must be odd and positive, got {self.window}")
        object.__setattr__(self, 'extent', extent)
        object.__setattr__(self, 'resolution', resolution)

    @property
    def lower(self):
        return np.array(self.extent[0::2])

    @property
    def upper(self):
        return np.array(self.extent[1::2])

    @property
    def cell_size(self):
        """(cell_x, cell_y, cell_height) in meters."""
        return (self.upper - self.lower) / np.array(self.resolution, dtype=np.float64)

    def bin_edges(self, axis):
        """The n + 1 cell edges along one axis; edge k is lower + extent * (k / n)."""
        n = self.resolution[axis]
        lo, hi = self.extent[2 * axis], self.extent[2 * axis + 1]
        return lo + (hi - lo) * (np.arange(n + 1) / n)

    def voxel_indices(self, points):
        """
        Map points to voxel indices under uniform binning.

        Interior boundaries belong to the higher-index cell; the upper face
        is clamped to the last cell.

        Returns:
            tuple: (indices (M, 3) int array, mask (N,) of in-extent points)
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lower, upper = self.lower, self.upper
        inside = np.all((pts >= lower) & (pts <= upper), axis=1)
        kept = pts[inside]
        idx = np.stack([np.searchsorted(self.bin_edges(a), kept[:, a], side='right') - 1 for a in range(3)],
                       axis=1).astype(np.int64).reshape(-1, 3)
        idx = np.clip(idx, 0, np.array(self.resolution) - 1)
        return idx, inside

    def cell_centers(self, coords, stride=1):
        """Metric (x, y) centers of cells at the given stride (1 = fine grid)."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        size = self.cell_size[:2] * stride
        return self.lower[:2] + (coords + 0.5) * size

    def channel_heights(self):
        """z-center of every channel: zmin + (k + 0.5) * cell_height."""
        zmin = self.extent[4]
        return zmin + (np.arange(self.resolution[2]) + 0.5) * self.cell_size[2]


@dataclass(frozen=True)
class BevGrid:
    """Dense H x W x C binary occupancy and its per-pillar mask B*."""
    config: BevConfig
    occupancy: np.ndarray
    dropped: int = 0
    pillar_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.uint8)
        if occ.shape != self.config.resolution:
            raise ShapeError(f"occupancy shape {occ.shape} does not match {self.config.resolution}")
        if occ.size and occ.max() > 1:
            raise ShapeError("occupancy must be binary")
        occ = occ.copy()
        occ.setflags(write=False)
        mask = occ.max(axis=2) if occ.shape[2] else np.zeros(occ.shape[:2], dtype=np.uint8)
        mask.setflags(write=False)
        object.__setattr__(self, 'occupancy', occ)
        object.__setattr__(self, 'pillar_mask', mask)

    def __repr__(self):
        return f'<BevGrid {self.config.resolution} pillars={self.pillar_count}>'

    @property
    def pillar_count(self):
        return int(np.count_nonzero(self.pillar_mask))

    def occupied_pillars(self):
        """(N, 2) coordinates of non-empty pillars, lexicographically sorted."""
        return np.argwhere(self.pillar_mask > 0).astype(np.int64)

    def pillar_features(self, coords=None):
        """Occupancy vectors (N, C) of the given pillars as float64 input channels."""
        coords = self.occupied_pillars() if coords is None else coords
        return self.occupancy[coords[:, 0], coords[:, 1], :].astype(np.float64)


def voxelize(cloud, config):
    """
    Convert a point cloud into a multi-layer BEV occupancy grid.

    Points outside the extent are dropped; the count is kept on the grid.
    """
    occupancy = np.zeros(config.resolution, dtype=np.uint8)
    idx, inside = config.voxel_indices(cloud.points)
    occupancy[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    dropped = int(inside.size - np.count_nonzero(inside))
    if dropped:
        logger.debug(f"voxelize dropped {dropped} of {inside.size} points outside the extent")
    return BevGrid(config=config, occupancy=occupancy, dropped=dropped)


def pillar_heights(grid, i, j):
    """
    Occupied-voxel heights of one pillar.

    Returns:
        list: (channel index, z-center in meters) in ascending channel order
    """
    height, width, _ = grid.config.resolution
    if not (0 <= i < height and 0 <= j < width):
        raise ShapeError(f"pillar ({i}, {j}) is outside the {height}x{width} grid")
    centers = grid.config.channel_heights()
    return [(int(k), float(centers[k])) for k in np.flatnonzero(grid.occupancy[i, j])]


def voxel_centers(grid):
    """Metric centers (M, 3) of all occupied voxels, in (i, j, k) order."""
    idx = np.argwhere(grid.occupancy > 0)
    lower = grid.config.lower
    return lower + (idx + 0.5) * grid.config.cell_size
