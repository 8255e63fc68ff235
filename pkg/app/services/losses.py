"""
Multi-task training losses and correspondence sampling.

Correspondence radii are measured in the (x, y) plane after mapping Q into
P's frame with the ground truth. Per-anchor positive and negative sets are
padded into rectangular batches with masks so every loss is a handful of
tape ops instead of one graph per anchor.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from app.models.bev import voxel_centers
from app.nn import tensor as T
from app.utils.errors import (ConfigError, EmptyInputError, NoOverlapError, NumericError,
                              SamplingContractError, ShapeError)

logger = logging.getLogger(__name__)

TERMS = ('desc', 'det', 'reg', 'bce', 'sg')
MASK_FILL = 1e30
LOG_FLOOR = 1e-12
DIST_EPS = 1e-12


@dataclass(frozen=True)
class CircleParams:
    delta_p: float = 0.1
    delta_n: float = 1.4
    scale: float = 10.0

    def __post_init__(self):
        if not 0 < self.delta_p < self.delta_n:
            raise ConfigError("circle margins must satisfy 0 < delta_p < delta_n")
        if self.scale <= 0:
            raise ConfigError("circle scale must be positive")


@dataclass(frozen=True, eq=False)
class RegressedCloud:
    """Regressed 3D points of one cloud: fixed (x, y) cell centers and a differentiable z."""
    coords: np.ndarray
    xy: np.ndarray
    z: T.Tensor

    @classmethod
    def from_heights(cls, heights, bev):
        coords = heights.active.coords
        return cls(coords, bev.cell_centers(coords), heights.z)

    def __len__(self):
        return self.xy.shape[0]

    def points(self):
        """Detached (N, 3) positions."""
        return np.column_stack([self.xy, self.z.data])


@dataclass(frozen=True, eq=False)
class CorrespondenceSample:
    """One anchor of P with positive and negative cells of Q; `match` is its nearest positive."""
    anchor: int
    positives: np.ndarray
    negatives: np.ndarray
    match: int

    def __post_init__(self):
        if self.positives.size == 0 or self.negatives.size == 0:
            raise SamplingContractError(f"anchor {self.anchor} needs at least one positive and one negative")
        if np.intersect1d(self.positives, self.negatives).size:
            raise SamplingContractError(f"anchor {self.anchor} has overlapping positive and negative sets")


@dataclass(frozen=True, eq=False)
class OverlapLabels:
    """Binary labels on the active overlap-resolution cells of both clouds."""
    coords_p: np.ndarray
    labels_p: np.ndarray
    coords_q: np.ndarray
    labels_q: np.ndarray

    def swapped(self):
        return OverlapLabels(self.coords_q, self.labels_q, self.coords_p, self.labels_p)


def sample_correspondences(points_p, points_q, gt, n, r_p, r_s, max_negatives, seed):
    """
    Draw up to `n` anchors of P that have a positive in Q within r_p.

    Negatives are drawn uniformly from Q cells beyond r_s, at most
    `max_negatives` per anchor. Deterministic for a given seed.

    Raises:
        NoOverlapError: no anchor has a positive
    """
    points_p = np.asarray(points_p, dtype=np.float64).reshape(-1, 3)
    points_q = np.asarray(points_q, dtype=np.float64).reshape(-1, 3)
    if points_p.shape[0] == 0 or points_q.shape[0] == 0:
        raise EmptyInputError("correspondence sampling needs two non-empty clouds")
    q_xy = gt.apply(points_q)[:, :2]
    p_xy = points_p[:, :2]
    tree = cKDTree(q_xy)
    positives = tree.query_ball_point(p_xy, r_p)
    has_positive = np.array([i for i, hits in enumerate(positives) if hits], dtype=np.int64)
    if has_positive.size == 0:
        raise NoOverlapError("no anchor has a positive within the positive radius")
    near = tree.query_ball_point(p_xy[has_positive], r_s, return_length=True)
    eligible = has_positive[near < q_xy.shape[0]]
    if eligible.size == 0:
        raise NoOverlapError("no anchor has negatives beyond the safe radius")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=min(n, eligible.size), replace=False))
    samples = []
    for anchor in chosen:
        dist = np.linalg.norm(q_xy - p_xy[anchor], axis=1)
        pos = np.array(sorted(positives[anchor]), dtype=np.int64)
        far = np.flatnonzero(dist > r_s)
        if far.size == 0:
            continue
        neg = np.sort(rng.choice(far, size=min(max_negatives, far.size), replace=False))
        samples.append(CorrespondenceSample(int(anchor), pos, neg, int(pos[np.argmin(dist[pos])])))
    if not samples:
        raise NoOverlapError("no anchor has negatives beyond the safe radius")
    return samples


def _pad(rows):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), -1, dtype=np.int64)
    for n, row in enumerate(rows):
        out[n, :len(row)] = row
    return out


@dataclass(frozen=True, eq=False)
class SampleDistances:
    """Padded descriptor distances: positives (A, P), negatives (A, K), matched positive (A,)."""
    pos: T.Tensor
    pos_mask: np.ndarray
    neg: T.Tensor
    neg_mask: np.ndarray
    match: T.Tensor

    @property
    def anchors(self):
        return self.pos.shape[0]

    @classmethod
    def from_lists(cls, positives, negatives, match=None):
        """Build from explicit per-anchor distance lists (the matched positive defaults to the first)."""
        def padded(rows):
            width = max([len(r) for r in rows] + [1])
            values = np.zeros((len(rows), width))
            mask = np.zeros((len(rows), width))
            for n, row in enumerate(rows):
                values[n, :len(row)] = row
                mask[n, :len(row)] = 1.0
            return values, mask

        pos, pos_mask = padded(positives)
        neg, neg_mask = padded(negatives)
        if match is None:
            match = [row[0] if len(row) else 0.0 for row in positives]
        return cls(T.Tensor(pos), pos_mask, T.Tensor(neg), neg_mask, T.Tensor(np.asarray(match, dtype=np.float64)))


def _row_distances(anchor_feats, feats, index):
    """Euclidean distances (A, W) between each anchor row and the rows `index` (A, W) of `feats`."""
    a, w = index.shape
    gathered = T.reshape(T.take_rows(feats, index.reshape(-1)), (a, w, -1))
    diff = T.sub(gathered, T.reshape(anchor_feats, (a, 1, -1)))
    return T.sqrt(T.add(T.total(T.mul(diff, diff), axis=2), DIST_EPS))


def pair_distances(samples, feats_p, feats_q):
    """Descriptor distances of sampled correspondences, differentiable in both feature tensors."""
    anchors = np.array([s.anchor for s in samples], dtype=np.int64)
    pos_idx = _pad([s.positives for s in samples])
    neg_idx = _pad([s.negatives for s in samples])
    match_idx = np.array([[s.match] for s in samples], dtype=np.int64)
    anchor_feats = T.take_rows(feats_p, anchors)
    return SampleDistances(
        pos=_row_distances(anchor_feats, feats_q, pos_idx),
        pos_mask=(pos_idx >= 0).astype(np.float64),
        neg=_row_distances(anchor_feats, feats_q, neg_idx),
        neg_mask=(neg_idx >= 0).astype(np.float64),
        match=T.reshape(_row_distances(anchor_feats, feats_q, match_idx), (-1,))
    )


def _check_contract(dist):
    if dist.anchors == 0:
        raise SamplingContractError("no correspondence samples")
    if dist.pos_mask.sum(axis=1).min() == 0 or dist.neg_mask.sum(axis=1).min() == 0:
        raise SamplingContractError("every anchor needs a positive and a negative")


def circle_loss(dist, params):
    """
    Mean over anchors of ln(1 + sum_p exp(a_p) * sum_n exp(a_n)).

    a_p = scale * (d - delta_p) * |d - delta_p|, a_n = scale * (delta_n - d) * |delta_n - d|.
    """
    _check_contract(dist)
    dp = T.sub(dist.pos, params.delta_p)
    dn = T.sub(params.delta_n, dist.neg)
    exp_p = T.add(T.mul(T.mul(dp, T.absolute(dp)), params.scale), (dist.pos_mask - 1.0) * MASK_FILL)
    exp_n = T.add(T.mul(T.mul(dn, T.absolute(dn)), params.scale), (dist.neg_mask - 1.0) * MASK_FILL)
    lse = T.add(T.logsumexp(exp_p, axis=1), T.logsumexp(exp_n, axis=1))
    return T.mean(T.softplus(lse))


def hardest_negative(dist):
    return T.amin(T.add(dist.neg, (1.0 - dist.neg_mask) * MASK_FILL), axis=1)


def detection_loss(dist, anchor_scores, match_scores):
    """Mean of (d_pos - d_neg)(s_anchor + s_match), d_neg the hardest negative."""
    _check_contract(dist)
    gap = T.sub(dist.match, hardest_negative(dist))
    return T.mean(T.mul(gap, T.add(anchor_scores, match_scores)))


def regression_term(reg_p, raw_p, reg_q, gt, r_p):
    """
    Height loss of the P side.

    Per regressed P' point: |z - z of the nearest raw P point in (x, y)| plus
    |z - z of the nearest Q' point mapped into P's frame| when that point lies
    within r_p.
    """
    if len(reg_p) == 0 or len(raw_p) == 0:
        raise EmptyInputError("regression loss needs regressed and raw points")
    raw = raw_p.points
    _, nearest = cKDTree(raw[:, :2]).query(reg_p.xy)
    total = T.absolute(T.sub(reg_p.z, raw[nearest, 2]))
    if len(reg_q):
        rot, trans = gt.rotation, gt.translation
        moved = gt.apply(reg_q.points())
        # z of Q' in P's frame stays differentiable in Q's regressed heights
        z_moved = T.add(T.mul(reg_q.z, rot[2, 2]), reg_q.xy @ rot[2, :2] + trans[2])
        dist, corr = cKDTree(moved[:, :2]).query(reg_p.xy)
        has = dist <= r_p
        partner = T.take_rows(z_moved, np.where(has, corr, -1))
        total = T.add(total, T.mul(T.absolute(T.sub(reg_p.z, partner)), has.astype(np.float64)))
    return T.mean(total)


def regression_loss(reg_p, raw_p, reg_q, raw_q, gt, r_p):
    """Mean of the P-side and Q-side height terms."""
    forward = regression_term(reg_p, raw_p, reg_q, gt, r_p)
    reverse = regression_term(reg_q, raw_q, reg_p, gt.inverse(), r_p)
    return T.mul(T.add(forward, reverse), 0.5)


def bce_loss(gamma, labels):
    """Binary cross entropy averaged over active cells, logs clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if gamma.shape != labels.shape:
        raise ShapeError(f"{gamma.shape[0]} overlap scores but {labels.size} labels")
    if labels.size == 0:
        raise EmptyInputError("no active cells to classify")
    log_pos = T.log(T.clip(gamma, LOG_FLOOR, 1.0))
    log_neg = T.log(T.clip(T.sub(1.0, gamma), LOG_FLOOR, 1.0))
    return T.mul(T.mean(T.add(T.mul(log_pos, labels), T.mul(log_neg, 1.0 - labels))), -1.0)


def classification_loss(g_p, g_q, labels, deep_distances=None, params=None):
    """BCE on both overlap maps plus the deep-feature circle loss when samples are given."""
    if not (np.array_equal(g_p.active.coords, labels.coords_p)
            and np.array_equal(g_q.active.coords, labels.coords_q)):
        raise ShapeError("overlap maps and labels cover different cells")
    loss = T.add(bce_loss(g_p.gamma, labels.labels_p), bce_loss(g_q.gamma, labels.labels_q))
    if deep_distances is not None:
        loss = T.add(loss, circle_loss(deep_distances, params or CircleParams()))
    return loss


def _deep_cells(grid, stride):
    width = grid.config.resolution[1] // stride
    fine = grid.occupied_pillars() // stride
    keys = np.unique(fine[:, 0] * width + fine[:, 1])
    return np.stack([keys // width, keys % width], axis=1), keys, width


def _side_labels(grid, points, stride):
    coords, keys, width = _deep_cells(grid, stride)
    idx, _ = grid.config.voxel_indices(points)
    hit = np.unique((idx[:, 0] // stride) * width + idx[:, 1] // stride)
    return coords, np.isin(keys, hit).astype(np.int8)


def make_overlap_labels(grid_p, grid_q, gt, stride, cloud_p=None, cloud_q=None):
    """
    Label each active deep cell 1 iff some point of the other cloud, mapped into
    this cloud's frame, falls inside the cell's footprint.

    Raw clouds are used when given; otherwise occupied voxel centers stand in.
    """
    if grid_p.config != grid_q.config:
        raise ShapeError("label construction needs grids with one configuration")
    pts_p = cloud_p.points if cloud_p is not None else voxel_centers(grid_p)
    pts_q = cloud_q.points if cloud_q is not None else voxel_centers(grid_q)
    coords_p, labels_p = _side_labels(grid_p, gt.apply(pts_q), stride)
    coords_q, labels_q = _side_labels(grid_q, gt.inverse().apply(pts_p), stride)
    return OverlapLabels(coords_p, labels_p, coords_q, labels_q)


def loss_weights(loss_section):
    s = loss_section
    return {'desc': s.w_desc, 'det': s.w_det, 'reg': s.w_reg, 'bce': s.w_bce, 'sg': s.w_sg}


def total_loss(parts, weights, step=None):
    """
    Weighted sum of the enabled terms. A term is enabled when its weight is nonzero.

    Raises:
        NumericError: an enabled term is not finite
    """
    total = None
    for name in TERMS:
        weight = weights.get(name, 0.0)
        part = parts.get(name)
        if weight == 0 or part is None:
            continue
        value = part.item()
        if not np.isfinite(value):
            raise NumericError(name, value, step)
        term = T.mul(part, weight)
        total = term if total is None else T.add(total, term)
    return total if total is not None else T.Tensor(0.0)
