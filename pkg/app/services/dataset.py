"""
Synthetic scenes, simulated scans and scan pairs with exact ground truth,
plus pair assembly from KITTI-layout sequences.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.models.geometry import (PointCloud, RigidTransform, load_poses, write_kitti_bin,
                                 write_poses)
from app.models.scan_pair import CLUTTER, GROUND, POLE, WALL, ScanPair, Scene
from app.utils.errors import ExtentError, FormatError, InputOutputError

logger = logging.getLogger(__name__)

PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneParams:
    """Densities: ground per m^2, walls per m^2 of face, poles per m of height."""
    ground_density: float = 4.0
    ground_noise: float = 0.03
    walls: int = 12
    wall_length: tuple = (4.0, 15.0)
    wall_height: float = 4.0
    wall_density: float = 6.0
    poles: int = 20
    pole_height: float = 5.0
    pole_density: float = 20.0
    clutter_blobs: int = 15
    clutter_points: int = 150
    clutter_radius: float = 0.8
    ground_z: float = -1.7

    @classmethod
    def from_config(cls, data):
        return cls(ground_density=data.ground_density, ground_noise=data.ground_noise,
                   walls=data.walls, wall_length=(data.wall_length_min, data.wall_length_max),
                   wall_height=data.wall_height, wall_density=data.wall_density,
                   poles=data.poles, pole_height=data.pole_height, pole_density=data.pole_density,
                   clutter_blobs=data.clutter_blobs, clutter_points=data.clutter_points,
                   clutter_radius=data.clutter_radius, ground_z=-data.sensor_height)


@dataclass(frozen=True)
class ScanParams:
    range_limit: float = 30.0
    azimuth_res_deg: float = 0.4
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 5.0
    elevation_res_deg: float = 1.0

    @classmethod
    def from_config(cls, data):
        return cls(data.range_limit, data.azimuth_res_deg, data.elevation_min_deg,
                   data.elevation_max_deg, data.elevation_res_deg)


def expected_point_count(extent, params):
    """Mean scene size implied by the densities (wall length averaged over its range)."""
    xmin, xmax, ymin, ymax = extent
    ground = round(params.ground_density * (xmax - xmin) * (ymax - ymin))
    mean_length = 0.5 * (params.wall_length[0] + params.wall_length[1])
    walls = params.walls * params.wall_density * mean_length * params.wall_height
    poles = params.poles * round(params.pole_density * params.pole_height)
    clutter = params.clutter_blobs * params.clutter_points
    return ground + walls + poles + clutter


def generate_scene(seed, extent, params=SceneParams()):
    """
    Procedural world: noisy ground plane, axis-aligned walls, poles and clutter blobs.

    Args:
        seed: determines every random draw
        extent: (xmin, xmax, ymin, ymax) in meters
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = (float(v) for v in extent)
    base = params.ground_z
    parts, labels = [], []

    def add(points, label):
        parts.append(points)
        labels.append(np.full(points.shape[0], label, dtype=np.int8))

    n_ground = int(round(params.ground_density * (xmax - xmin) * (ymax - ymin)))
    add(np.column_stack([rng.uniform(xmin, xmax, n_ground), rng.uniform(ymin, ymax, n_ground),
                         base + rng.normal(0.0, params.ground_noise, n_ground)]), GROUND)

    for _ in range(params.walls):
        length = rng.uniform(*params.wall_length)
        along_x = rng.random() < 0.5
        cx, cy = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        count = int(round(params.wall_density * length * params.wall_height))
        offset = rng.uniform(-0.5 * length, 0.5 * length, count)
        z = base + rng.uniform(0.0, params.wall_height, count)
        xs = cx + offset if along_x else np.full(count, cx)
        ys = np.full(count, cy) if along_x else cy + offset
        add(np.column_stack([xs, ys, z]), WALL)

    for _ in range(params.poles):
        px, py = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        count = int(round(params.pole_density * params.pole_height))
        z = base + rng.uniform(0.0, params.pole_height, count)
        add(np.column_stack([np.full(count, px), np.full(count, py), z]), POLE)

    for _ in range(params.clutter_blobs):
        center = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax), base + params.clutter_radius])
        add(center + rng.normal(0.0, params.clutter_radius / 2.0, (params.clutter_points, 3)), CLUTTER)

    points = np.vstack(parts) if parts else np.zeros((0, 3))
    return Scene(PointCloud(points), np.concatenate(labels), (xmin, xmax, ymin, ymax))


def simulate_scan(points, pose, params=ScanParams()):
    """
    Nearest-hit-per-ray visibility from a sensor at `pose`.

    Each point is assigned to the ray nearest in azimuth and elevation; per ray
    only the closest point within the range limit survives. Output is in the
    sensor frame, ordered by (elevation ray, azimuth ray).
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        return PointCloud.empty()
    local = pose.inverse().apply(pts)
    rng_ = np.linalg.norm(local, axis=1)
    keep = (rng_ > 0) & (rng_ <= params.range_limit)
    local, rng_ = local[keep], rng_[keep]
    az_res = np.radians(params.azimuth_res_deg)
    el_res = np.radians(params.elevation_res_deg)
    n_az = int(round(2 * np.pi / az_res))
    n_el = int(round((params.elevation_max_deg - params.elevation_min_deg) / params.elevation_res_deg)) + 1
    az = np.arctan2(local[:, 1], local[:, 0])
    el = np.arcsin(np.clip(local[:, 2] / rng_, -1.0, 1.0))
    az_bin = np.round((az + np.pi) / az_res).astype(np.int64) % n_az
    el_bin = np.round((el - np.radians(params.elevation_min_deg)) / el_res).astype(np.int64)
    on_grid = (el_bin >= 0) & (el_bin < n_el)
    local, rng_ = local[on_grid], rng_[on_grid]
    ray = el_bin[on_grid] * n_az + az_bin[on_grid]
    # range first, coordinates break exact ties so the result ignores input order
    order = np.lexsort((local[:, 2], local[:, 1], local[:, 0], rng_, ray))
    first = np.ones(order.size, dtype=bool)
    first[1:] = ray[order][1:] != ray[order][:-1]
    return PointCloud(local[order[first]])


def _sensor_pose(x, y, yaw, height):
    return RigidTransform.from_yaw(yaw, (x, y, height))


def make_pair(scene, distance, seed, scan_params=ScanParams(), sensor_height=1.7,
              heading_delta=np.pi, margin=5.0):
    """
    Two sensor poses `distance` meters apart (planar) with random headings.

    The second heading differs from the first by at most `heading_delta`
    radians. gt maps Q-frame points into P's frame.

    Raises:
        ExtentError: no placement inside the scene extent shrunk by `margin`
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = scene.extent
    lo = np.array([xmin + margin, ymin + margin])
    hi = np.array([xmax - margin, ymax - margin])
    if np.any(hi < lo):
        raise ExtentError(f"margin {margin} m leaves no room inside the scene")
    for _ in range(PLACEMENT_ATTEMPTS):
        start = rng.uniform(lo, hi)
        direction = rng.uniform(-np.pi, np.pi)
        end = start + distance * np.array([np.cos(direction), np.sin(direction)])
        if np.all(end >= lo) and np.all(end <= hi):
            break
    else:
        raise ExtentError(f"cannot place two poses {distance} m apart inside the scene")
    yaw_p = rng.uniform(-np.pi, np.pi)
    yaw_q = yaw_p + rng.uniform(-heading_delta, heading_delta)
    pose_p = _sensor_pose(start[0], start[1], yaw_p, sensor_height)
    pose_q = _sensor_pose(end[0], end[1], yaw_q, sensor_height)
    gt = pose_p.inverse().compose(pose_q)
    return ScanPair(gt, float(distance),
                    points_p=simulate_scan(scene.cloud, pose_p, scan_params),
                    points_q=simulate_scan(scene.cloud, pose_q, scan_params))


def make_loop_sequence(scene, frames, radius, seed, scan_params=ScanParams(), sensor_height=1.7,
                       offset=0.5):
    """
    Two laps around the scene center; lap two revisits lap one's poses with a
    small lateral offset and heading jitter.

    Returns:
        tuple: (list of PointCloud, list of RigidTransform world poses)
    """
    rng = np.random.default_rng(seed)
    per_lap = frames // 2
    cx = 0.5 * (scene.extent[0] + scene.extent[1])
    cy = 0.5 * (scene.extent[2] + scene.extent[3])
    poses = []
    for lap in range(2):
        for k in range(per_lap):
            angle = 2 * np.pi * k / per_lap
            r = radius + (rng.uniform(-offset, offset) if lap else 0.0)
            yaw = angle + np.pi / 2 + (rng.uniform(-0.1, 0.1) if lap else 0.0)
            poses.append(_sensor_pose(cx + r * np.cos(angle), cy + r * np.sin(angle), yaw, sensor_height))
    clouds = [simulate_scan(scene.cloud, pose, scan_params) for pose in poses]
    return clouds, poses


def write_sequence(directory, clouds, poses):
    """KITTI layout: velodyne/000000.bin ... plus poses.txt."""
    directory = Path(directory)
    for n, cloud in enumerate(clouds):
        write_kitti_bin(cloud, directory / 'velodyne' / f'{n:06d}.bin')
    write_poses(poses, directory / 'poses.txt')


def kitti_pairs(sequence_dir, poses_file, bucket):
    """
    Frame pairs whose pose distance d satisfies lo <= d < hi, clouds loaded lazily.

    Raises:
        FormatError: scan and pose counts differ
    """
    scans = sorted((Path(sequence_dir) / 'velodyne').glob('*.bin'))
    if not scans and not Path(sequence_dir).is_dir():
        raise InputOutputError(sequence_dir, "not a directory")
    poses = load_poses(poses_file)
    if len(scans) != len(poses):
        raise FormatError(f"{len(scans)} scans but {len(poses)} poses")
    lo, hi = bucket
    centers = np.array([p.translation for p in poses]).reshape(-1, 3)
    pairs = []
    for i in range(len(poses)):
        dist = np.linalg.norm(centers[i + 1:] - centers[i], axis=1)
        for offset in np.flatnonzero((dist >= lo) & (dist < hi)):
            j = i + 1 + int(offset)
            gt = poses[i].inverse().compose(poses[j])
            pairs.append(ScanPair(gt, float(dist[offset]), path_p=scans[i], path_q=scans[j]))
    logger.debug(f"{len(pairs)} pairs in bucket [{lo}, {hi}) from {len(poses)} frames")
    return pairs
