"""
Descriptor matching and robust rigid registration.

RANSAC draws its hypotheses in fixed-size batches and solves them with a
stacked SVD. Within a batch hypotheses are ranked in draw order, so the
result equals a one-at-a-time loop with the same random stream.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from app.models.geometry import RigidTransform
from app.models.keypoint import keypoint_arrays
from app.utils.errors import DegenerateConfigurationError, EmptyInputError, InsufficientDataError

logger = logging.getLogger(__name__)

MIN_SAMPLE = 3
RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairs (P keypoint, Q keypoint) with their descriptor distances."""
    idx_p: np.ndarray
    idx_q: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return self.idx_p.size

    def __repr__(self):
        return f'<CorrespondenceSet {len(self)} pairs>'


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    inliers: np.ndarray
    correspondences: int
    iterations: int
    success: bool
    rms: float = float('nan')

    @property
    def inlier_ratio(self):
        return self.inliers.size / self.correspondences if self.correspondences else 0.0

    def to_record(self):
        """`12 transform values, inlier count, correspondence count, iterations` on one line."""
        values = ','.join(f'{v:.12f}' for v in self.transform.to_row_major())
        return f'{values},{self.inliers.size},{self.correspondences},{self.iterations}'

    def to_dict(self):
        return {
            'transform': self.transform.as_matrix()[:3].tolist(),
            'inliers': int(self.inliers.size),
            'correspondences': self.correspondences,
            'inlier_ratio': self.inlier_ratio,
            'iterations': self.iterations,
            'success': self.success
        }


def mutual_nearest(desc_p, desc_q):
    """Mutual nearest neighbours under Euclidean distance; ties go to the lower index."""
    desc_p = np.asarray(desc_p, dtype=np.float64)
    desc_q = np.asarray(desc_q, dtype=np.float64)
    if desc_p.shape[0] == 0 or desc_q.shape[0] == 0:
        raise EmptyInputError("matching needs keypoints in both clouds")
    dist = cdist(desc_p, desc_q)
    nn_pq = dist.argmin(axis=1)
    nn_qp = dist.argmin(axis=0)
    idx_p = np.flatnonzero(nn_qp[nn_pq] == np.arange(desc_p.shape[0]))
    idx_q = nn_pq[idx_p]
    return CorrespondenceSet(idx_p, idx_q, dist[idx_p, idx_q])


def match(keypoints_p, keypoints_q):
    _, desc_p = keypoint_arrays(keypoints_p)
    _, desc_q = keypoint_arrays(keypoints_q)
    return mutual_nearest(desc_p, desc_q)


def _solve(p, q, w):
    """
    Batched weighted Procrustes mapping q onto p.

    Args:
        p, q: (B, M, 3) point sets; w: (B, M) weights

    Returns:
        tuple: rotations (B, 3, 3), translations (B, 3), valid mask (B,)
    """
    w_sum = w.sum(axis=1)
    safe = np.where(w_sum > 0, w_sum, 1.0)
    cp = (w[..., None] * p).sum(axis=1) / safe[:, None]
    cq = (w[..., None] * q).sum(axis=1) / safe[:, None]
    h = np.einsum('bm,bmi,bmj->bij', w, q - cq[:, None], p - cp[:, None])
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    fix = np.tile(np.eye(3), (len(h), 1, 1))
    fix[:, 2, 2] = d
    rot = v @ fix @ ut
    trans = cp - np.einsum('bij,bj->bi', rot, cq)
    valid = (w_sum > 0) & (s[:, 1] > RANK_TOL * np.maximum(s[:, 0], 1.0))
    return rot, trans, valid


def kabsch(points_p, points_q, weights=None):
    """
    Rigid transform T minimizing sum_i w_i |p_i - T(q_i)|^2.

    Raises:
        InsufficientDataError: fewer than three pairs
        DegenerateConfigurationError: rank-deficient (e.g. collinear) configuration
    """
    p = np.asarray(points_p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(points_q, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise DegenerateConfigurationError("point sets differ in size")
    if p.shape[0] < MIN_SAMPLE:
        raise InsufficientDataError(f"kabsch needs at least {MIN_SAMPLE} pairs, got {p.shape[0]}")
    w = np.ones(p.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    rot, trans, valid = _solve(p[None], q[None], w[None])
    if not valid[0]:
        raise DegenerateConfigurationError("point configuration is collinear or degenerate")
    return RigidTransform(rot[0], trans[0])


def _distinct_triples(rng, n, count):
    """`count` uniformly random triples of distinct indices in range(n)."""
    a = rng.integers(0, n, count)
    b = rng.integers(0, n - 1, count)
    b = b + (b >= a)
    c = rng.integers(0, n - 2, count)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=1)


def _score(rot, trans, p, q, radius):
    residual = np.linalg.norm(p[None] - (np.einsum('bij,mj->bmi', rot, q) + trans[:, None]), axis=2)
    inlier = residual <= radius
    counts = inlier.sum(axis=1)
    sq = np.where(inlier, residual ** 2, 0.0).sum(axis=1)
    rms = np.sqrt(sq / np.maximum(counts, 1))
    return counts, rms


def ransac(points_p, points_q, max_iterations, inlier_radius, seed,
           early_exit_ratio=0.9, batch=1000):
    """
    RANSAC over corresponded points (row i of P pairs with row i of Q).

    Keeps the hypothesis with most inliers (ties: lower RMS, then earlier draw),
    stops early once the inlier ratio reaches `early_exit_ratio`, and refits on
    the best inlier set when that does not lose inliers.
    """
    p = np.asarray(points_p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(points_q, dtype=np.float64).reshape(-1, 3)
    n = p.shape[0]
    if n < MIN_SAMPLE:
        raise InsufficientDataError(f"RANSAC needs at least {MIN_SAMPLE} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best = (-1, np.inf, None, None)
    used = 0
    while used < max_iterations:
        size = min(batch, max_iterations - used)
        triples = _distinct_triples(rng, n, size)
        rot, trans, valid = _solve(p[triples], q[triples], np.ones((size, MIN_SAMPLE)))
        counts, rms = _score(rot, trans, p, q, inlier_radius)
        counts = np.where(valid, counts, -1)
        hit = np.flatnonzero(counts >= early_exit_ratio * n)
        stop = hit[0] + 1 if hit.size else size
        counts, rms = counts[:stop], rms[:stop]
        order = np.lexsort((np.arange(stop), rms, -counts))
        top = order[0]
        if counts[top] > best[0] or (counts[top] == best[0] and rms[top] < best[1]):
            best = (int(counts[top]), float(rms[top]), rot[top], trans[top])
        used += stop
        if hit.size:
            break
    count, rms, rot, trans = best
    if rot is None or count < MIN_SAMPLE:
        logger.info(f"RANSAC failed: best hypothesis has {max(count, 0)} inliers of {n}")
        transform = RigidTransform.identity() if rot is None else RigidTransform(rot, trans)
        inliers = np.zeros(0, dtype=np.int64) if rot is None else _inliers(transform, p, q, inlier_radius)
        return RegistrationResult(transform, inliers, n, used, False, rms)
    transform = RigidTransform(rot, trans)
    inliers = _inliers(transform, p, q, inlier_radius)
    try:
        refit = kabsch(p[inliers], q[inliers])
        refit_inliers = _inliers(refit, p, q, inlier_radius)
        if refit_inliers.size >= inliers.size:
            transform, inliers = refit, refit_inliers
    except DegenerateConfigurationError:
        pass
    residual = np.linalg.norm(p[inliers] - transform.apply(q[inliers]), axis=1)
    return RegistrationResult(transform, inliers, n, used, True, float(np.sqrt(np.mean(residual ** 2))))


def _inliers(transform, p, q, radius):
    return np.flatnonzero(np.linalg.norm(p - transform.apply(q), axis=1) <= radius)


def ransac_register(correspondences, keypoints_p, keypoints_q, max_iterations, inlier_radius, seed,
                    early_exit_ratio=0.9, batch=1000):
    """Robustly estimate the transform mapping Q keypoints onto their P matches."""
    pos_p, _ = keypoint_arrays(keypoints_p)
    pos_q, _ = keypoint_arrays(keypoints_q)
    if len(correspondences) < MIN_SAMPLE:
        raise InsufficientDataError(
            f"registration needs at least {MIN_SAMPLE} correspondences, got {len(correspondences)}")
    return ransac(pos_p[correspondences.idx_p], pos_q[correspondences.idx_q],
                  max_iterations, inlier_radius, seed, early_exit_ratio, batch)
