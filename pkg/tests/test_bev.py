import math

import numpy as np
import pytest

from app.models.bev import BevConfig, pillar_heights, voxel_centers, voxelize
from app.models.geometry import PointCloud
from app.utils.errors import ConfigError, ShapeError


@pytest.fixture
def config():
    return BevConfig((-2.0, 2.0, -2.0, 2.0, -2.0, 2.0), (4, 4, 4))


def brute_force_binning(points, config):
    """Per-point index arithmetic, independent of BevConfig.voxel_indices."""
    occupancy = np.zeros(config.resolution, dtype=np.uint8)
    lows, highs = config.extent[0::2], config.extent[1::2]
    for point in points:
        index = []
        for value, lo, hi, n in zip(point, lows, highs, config.resolution):
            if value < lo or value > hi:
                break
            index.append(min(int(math.floor((value - lo) / ((hi - lo) / n))), n - 1))
        else:
            occupancy[tuple(index)] = 1
    return occupancy


def test_empty_cloud_gives_empty_grid(config):
    """No points means no occupied voxel and no occupied pillar."""
    grid = voxelize(PointCloud.empty(), config)
    assert grid.occupancy.sum() == 0
    assert grid.pillar_mask.sum() == 0
    assert grid.pillar_count == 0


def test_single_point_at_center(config):
    """The extent center occupies one voxel and one pillar."""
    grid = voxelize(PointCloud([[0.0, 0.0, 0.0]]), config)
    assert grid.occupancy.sum() == 1
    assert grid.occupancy[2, 2, 2] == 1
    assert grid.pillar_count == 1


def test_random_points_match_oracle(config):
    """Voxelization agrees with brute-force binning on 100 random points."""
    rng = np.random.default_rng(3)
    points = rng.uniform(-2.0, 2.0, size=(100, 3))
    grid = voxelize(PointCloud(points), config)
    np.testing.assert_array_equal(grid.occupancy, brute_force_binning(points, config))
    np.testing.assert_array_equal(grid.pillar_mask, grid.occupancy.max(axis=2))


def test_boundaries_with_inexact_cell_size():
    """With 0.1 m cells each interior boundary point lands in the higher cell."""
    config = BevConfig((0.0, 1.0, 0.0, 1.0, 0.0, 1.0), (10, 10, 10))
    values = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    points = [[v, v, v] for v in values]
    idx, inside = config.voxel_indices(points)
    assert inside.all()
    expected = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9]
    for axis in range(3):
        assert idx[:, axis].tolist() == expected


def test_out_of_extent_points_are_dropped(config):
    """Points outside the extent are counted and left out."""
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5], [5.0, 0.0, 0.0], [0.0, 0.0, -3.0]]), config)
    assert grid.dropped == 2
    assert grid.occupancy.sum() == 1


def test_upper_face_joins_last_cell(config):
    """A point on the maximum face is binned into the last cell."""
    grid = voxelize(PointCloud([[2.0, 2.0, 2.0]]), config)
    assert grid.occupancy[3, 3, 3] == 1


def test_empty_pillar_has_no_heights(config):
    """An empty pillar yields an empty list."""
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5]]), config)
    assert pillar_heights(grid, 0, 0) == []


def test_single_voxel_height():
    """k = 0 with zmin -2 and 0.25 m cells is centered at -1.875 m."""
    config = BevConfig((0.0, 4.0, 0.0, 4.0, -2.0, 0.0), (4, 4, 8))
    grid = voxelize(PointCloud([[0.5, 0.5, -1.9]]), config)
    assert pillar_heights(grid, 0, 0) == [(0, -1.875)]


def test_full_pillar_heights(config):
    """A full pillar lists every channel center in ascending order."""
    points = [[0.5, 0.5, z] for z in (-1.5, -0.5, 0.5, 1.5)]
    grid = voxelize(PointCloud(points), config)
    heights = pillar_heights(grid, 2, 2)
    assert [k for k, _ in heights] == [0, 1, 2, 3]
    for k, z in heights:
        assert z == pytest.approx(-2.0 + (k + 0.5) * 1.0, abs=1e-12)


def test_pillar_outside_grid(config):
    """Asking for a pillar outside the grid is a shape error."""
    grid = voxelize(PointCloud.empty(), config)
    with pytest.raises(ShapeError):
        pillar_heights(grid, 4, 0)


def test_voxel_centers(config):
    """Occupied voxel centers sit half a cell above the lower corner."""
    grid = voxelize(PointCloud([[-1.9, 1.9, 0.1]]), config)
    np.testing.assert_allclose(voxel_centers(grid), [[-1.5, 1.5, 0.5]])


def test_config_validation():
    """Even windows, empty extents and zero resolutions are rejected."""
    with pytest.raises(ConfigError):
        BevConfig((-1, 1, -1, 1, -1, 1), (4, 4, 4), window=2)
    with pytest.raises(ConfigError):
        BevConfig((1, 1, -1, 1, -1, 1), (4, 4, 4))
    with pytest.raises(ConfigError):
        BevConfig((-1, 1, -1, 1, -1, 1), (4, 0, 4))
