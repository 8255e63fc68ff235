"""Description, detection, height-regression and overlap heads."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from app.models.keypoint import Keypoint
from app.nn import layers as L
from app.nn import tensor as T
from app.nn.sparse import SparseFeatureMap
from app.utils.errors import ConsistencyError, DegenerateFeatureError, EmptyContextError, ShapeError

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9


class DescriptorMap(SparseFeatureMap):
    """Feature map whose rows are unit-norm descriptors."""

    def __post_init__(self):
        super().__post_init__()
        norms = np.linalg.norm(self.features.data, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ShapeError("descriptor rows must have unit norm")


@dataclass(frozen=True, eq=False)
class SaliencyMaps:
    alpha: SparseFeatureMap
    beta: SparseFeatureMap
    score: T.Tensor


@dataclass(frozen=True, eq=False)
class HeightMap:
    """Per-pillar weights W (N, C) and the regressed height z (N,) in meters."""
    active: object
    weights: T.Tensor
    z: T.Tensor

    @property
    def heights(self):
        return self.z.data


@dataclass(frozen=True, eq=False)
class OverlapMap:
    """Overlap probability gamma per active cell of the overlap-source resolution."""
    active: object
    gamma: T.Tensor

    @property
    def scores(self):
        return self.gamma.data

    @property
    def count(self):
        return len(self.active)


@dataclass(frozen=True, eq=False)
class CloudOutputs:
    """Everything the heads produce for one cloud."""
    grid: object
    maps: dict
    descriptors: DescriptorMap
    saliency: SaliencyMaps
    heights: HeightMap
    overlap_source: SparseFeatureMap


def _require_occupied_set(fmap, grid):
    if not np.array_equal(fmap.coords, grid.occupied_pillars()):
        raise ConsistencyError("feature map active set differs from the grid's occupied pillars")


def describe(f1, weight, bias=None):
    """1x1 conv then per-cell L2 normalization."""
    out = L.submanifold_conv(f1, weight, bias)
    return DescriptorMap(out.active, L.l2_normalize(out.features))


def spatial_saliency(d, grid, window):
    """alpha = softplus(D - mean of D over the non-empty s x s neighbourhood)."""
    _require_occupied_set(d, grid)
    pooled = L.sparse_avg_pool(d, window)
    return d.with_features(T.softplus(T.sub(d.features, pooled.features)))


def spatial_saliency_dense(dense, pillar_mask, window):
    """
    Box-filter form of the spatial saliency on dense H x W x K arrays.

    Returns alpha at every cell where `pillar_mask` is set, in row-major order.
    """
    mask = np.asarray(pillar_mask, dtype=np.float64)
    dense = np.asarray(dense, dtype=np.float64) * mask[..., None]
    summed = ndimage.uniform_filter(dense, size=(window, window, 1), mode='constant')
    counts = ndimage.uniform_filter(mask, size=window, mode='constant')
    active = mask > 0
    mean = summed[active] / counts[active][:, None]
    return np.logaddexp(0.0, dense[active] - mean)


def channel_score(d):
    """beta = D / max_c D per cell; a cell whose largest entry is not positive is degenerate."""
    peak = T.amax(d.features, axis=1)
    flagged = np.flatnonzero(peak.data <= 0)
    if flagged.size:
        i, j = d.coords[flagged[0]]
        raise DegenerateFeatureError(f"{flagged.size} cells have no positive descriptor entry, first at ({i}, {j})")
    return d.with_features(T.div(d.features, T.reshape(peak, (-1, 1))))


def detection_score(alpha, beta):
    """s = max_k alpha * beta."""
    if not alpha.active.same_as(beta.active):
        raise ShapeError("alpha and beta maps must share one active set")
    return T.amax(T.mul(alpha.features, beta.features), axis=1)


def saliency(d, grid, window):
    alpha = spatial_saliency(d, grid, window)
    beta = channel_score(d)
    return SaliencyMaps(alpha, beta, detection_score(alpha, beta))


def regress_heights(f1, grid, weight, bias=None):
    """
    z = sum_k W_k H_k over occupied voxels, with W renormalized over them.

    Raises:
        ConsistencyError: an active cell has an empty pillar
    """
    _require_occupied_set(f1, grid)
    weights = T.sigmoid(L.submanifold_conv(f1, weight, bias).features)
    occupied = grid.pillar_features(f1.coords)
    if occupied.size and occupied.sum(axis=1).min() == 0:
        raise ConsistencyError("active cell with an empty pillar")
    masked = T.mul(weights, occupied)
    num = T.total(T.mul(masked, grid.config.channel_heights()), axis=1)
    den = T.total(masked, axis=1)
    return HeightMap(f1.active, weights, T.div(num, den))


def overlap_head(e_p, e_q, head):
    """
    Bilateral cross-attention fusion and classification of both deep maps.

    M = E + MLP(cat(E, att(E, E_other, E_other))), then conv -> ReLU -> conv -> sigmoid.
    """
    if e_p.n_active == 0 or e_q.n_active == 0:
        raise EmptyContextError("overlap head needs non-empty maps for both clouds")
    att, mlp = head.children['att'], head.children['mlp']

    def classify(e, other):
        fused = mlp(T.concat([e.features, att(e, other, other).features], axis=1))
        m = e.with_features(T.add(e.features, fused))
        h = L.pointwise(head.children['cls1'](m), 'relu')
        logits = head.children['cls2'](h).features
        return OverlapMap(e.active, T.reshape(T.sigmoid(logits), (-1,)))

    return classify(e_p, e_q), classify(e_q, e_p)


def similarity(g_p, g_q):
    """tau = (mean gamma_P + mean gamma_Q) / 2."""
    if g_p.count == 0 or g_q.count == 0:
        raise EmptyContextError("similarity needs non-empty overlap maps")
    return 0.5 * (float(g_p.scores.sum()) / g_p.count + float(g_q.scores.sum()) / g_q.count)


def forward_cloud(net, grid):
    """Backbone plus the per-cloud heads of one grid."""
    maps = net.encode(grid)
    f1 = maps['F1']
    describe_conv, height_conv = net.children['describe'], net.children['height']
    descriptors = describe(f1, describe_conv.params['weight'], describe_conv.params['bias'])
    return CloudOutputs(
        grid=grid,
        maps=maps,
        descriptors=descriptors,
        saliency=saliency(descriptors, grid, grid.config.window),
        heights=regress_heights(f1, grid, height_conv.params['weight'], height_conv.params['bias']),
        overlap_source=maps[net.overlap_source]
    )


def extract_keypoints(score, heights, descriptors, overlap, k, threshold, bev, stride):
    """
    Top-k cells by detection score among those whose overlap cell scores >= threshold.

    Args:
        score: per-cell detection scores (Tensor or array) on the fine active set
        overlap: OverlapMap at `stride`, or None to skip filtering
        k: maximum count; -1 keeps every candidate
        threshold: overlap cut; 0 disables the filter

    Returns:
        list: Keypoint objects, highest score first, ties by (i, j)
    """
    if k == 0:
        return []
    scores = score.data if isinstance(score, T.Tensor) else np.asarray(score, dtype=np.float64)
    coords = descriptors.coords
    candidates = np.ones(coords.shape[0], dtype=bool)
    if overlap is not None and threshold > 0:
        parent = overlap.active.lookup(coords // stride)
        gamma = np.where(parent >= 0, overlap.scores[np.maximum(parent, 0)], 0.0)
        candidates = gamma >= threshold
    idx = np.flatnonzero(candidates)
    order = idx[np.lexsort((coords[idx, 1], coords[idx, 0], -scores[idx]))]
    if k > 0:
        order = order[:k]
    xy = bev.cell_centers(coords[order])
    z = heights.heights[order]
    desc = descriptors.features.data[order]
    logger.debug(f"selected {order.size} keypoints from {idx.size} candidates")
    return [Keypoint((x, y, zz), scores[n], desc[r], cell=tuple(int(c) for c in coords[n]))
            for r, (n, (x, y), zz) in enumerate(zip(order, xy, z))]
