"""
Property suites run by `verify`: pooled-vs-direct saliency, finite-difference
gradient checks, Kabsch exactness, RANSAC robustness and dense-oracle
equivalence of the sparse layers.
"""
import logging
import time
from dataclasses import dataclass

import numpy as np

from app.config import TESTING_RUN_CONFIG
from app.models.bev import BevConfig, BevGrid
from app.models.geometry import PointCloud, RigidTransform
from app.nn import layers as L
from app.nn import tensor as T
from app.nn.sparse import ActiveSet, SparseFeatureMap
from app.nn.tensor import Parameter, backward
from app.services import heads, losses
from app.services.dataset import ScanParams, SceneParams, generate_scene, make_pair
from app.services.evaluation import pose_errors
from app.services.heads import OverlapMap
from app.services.network import BevNet, OverlapHead
from app.services.registration import kabsch, ransac
from app.services.training import compute_parts
from app.utils.errors import VerificationError

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-6
SALIENCY_TOL = 1e-12
KABSCH_TOL = 1e-9
ORACLE_TOL = 1e-10


@dataclass(frozen=True)
class SuiteResult:
    module: str
    prop: str
    passed: bool
    residual: float
    detail: str = ''

    def line(self):
        status = 'PASS' if self.passed else 'FAIL'
        detail = f' ({self.detail})' if self.detail else ''
        return f'{status} {self.module}: {self.prop} residual={self.residual:.3e}{detail}'


# Finite differences

def relative_error(analytic, numeric):
    """Norm-wise relative error with a small absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def central_difference(build, param, entry):
    """d build() / d param.flat[entry] with step 1e-5 * max(1, |value|)."""
    original = param.data
    h = FD_STEP * max(1.0, abs(original.flat[entry]))
    values = []
    for sign in (1.0, -1.0):
        shifted = original.copy()
        shifted.flat[entry] += sign * h
        param.data = shifted
        values.append(build().item())
    param.data = original
    return (values[0] - values[1]) / (2.0 * h)


def gradient_check(module, prop, build, params, rng=None, sample=None):
    """
    Compare backward() with central differences over every entry of `params`,
    or over `sample` seeded entries per tensor.
    """
    for p in params:
        p.zero_grad()
    backward(build())
    analytic, numeric = [], []
    for p in params:
        grad = p.grad.reshape(-1).copy()
        if sample is None or p.data.size <= sample:
            entries = range(p.data.size)
        else:
            entries = rng.choice(p.data.size, size=sample, replace=False)
        for entry in entries:
            analytic.append(grad[entry])
            numeric.append(central_difference(build, p, int(entry)))
    error = relative_error(analytic, numeric)
    return SuiteResult(module, prop, error <= GRAD_TOL, error, f'{len(analytic)} entries')


# Random instances

def random_active(rng, height, width, density=0.4):
    mask = rng.random((height, width)) < density
    if not mask.any():
        mask[rng.integers(height), rng.integers(width)] = True
    return ActiveSet.from_mask(mask)


def random_map(rng, height, width, channels, density=0.4, active=None):
    if active is None:
        active = random_active(rng, height, width, density)
    return SparseFeatureMap(active, Parameter(rng.normal(size=(len(active), channels))))


def grid_for(active, channels=4, window=3):
    """A BevGrid whose occupied pillars are exactly `active`."""
    config = BevConfig((0.0, float(active.height), 0.0, float(active.width), 0.0, float(channels)),
                       (active.height, active.width, channels), window)
    occupancy = np.zeros(config.resolution, dtype=np.uint8)
    rng = np.random.default_rng(len(active))
    occupancy[active.coords[:, 0], active.coords[:, 1], rng.integers(0, channels, len(active))] = 1
    extra = rng.random((len(active), channels)) < 0.3
    for n, (i, j) in enumerate(active.coords):
        occupancy[i, j, extra[n]] = 1
    return BevGrid(config, occupancy)


def _projection(rng, shape):
    return np.random.default_rng(int(rng.integers(1 << 31))).normal(size=shape)


def _scalar(tensor, weights):
    return T.total(T.mul(tensor, weights))


# Saliency equivalence

def direct_saliency(dense, mask, window):
    """Per active cell: softplus(D - mean of D over the active cells of its window)."""
    r = window // 2
    height, width = mask.shape
    out = []
    for i, j in np.argwhere(mask):
        rows = slice(max(i - r, 0), min(i + r + 1, height))
        cols = slice(max(j - r, 0), min(j + r + 1, width))
        neighbours = dense[rows, cols][mask[rows, cols]]
        out.append(np.logaddexp(0.0, dense[i, j] - neighbours.mean(axis=0)))
    return np.array(out)


def saliency_suite(seed=0, maps=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(maps):
        height, width = rng.integers(1, 33, size=2)
        channels = int(rng.integers(1, 17))
        window = int(rng.choice([1, 3, 5]))
        active = random_active(rng, height, width, rng.uniform(0.05, 0.9))
        dense = rng.normal(size=(height, width, channels))
        fmap = SparseFeatureMap.from_dense(dense, active.index_grid >= 0)
        mask = active.index_grid >= 0
        pooled = heads.spatial_saliency(fmap, grid_for(active), window).features.data
        reference = direct_saliency(dense, mask, window)
        box = heads.spatial_saliency_dense(dense, mask, window)
        for candidate in (pooled, box):
            worst = max(worst, float(np.max(np.abs(candidate - reference) / np.abs(reference))))
    return [SuiteResult('model_heads', 'pooled saliency equals direct window mean', worst <= SALIENCY_TOL,
                        worst, f'{maps} maps')]


# Gradient checks

def layer_gradient_suite(seed=1):
    rng = np.random.default_rng(seed)
    results = []

    x = random_map(rng, 6, 6, 3)
    w, b = Parameter(rng.normal(size=(3, 3, 3, 2))), Parameter(rng.normal(size=2))
    proj = _projection(rng, (x.n_active, 2))
    results.append(gradient_check('sparse_nn', 'submanifold_conv gradient',
                                  lambda: _scalar(L.submanifold_conv(x, w, b).features, proj),
                                  [x.features, w, b]))

    x = random_map(rng, 6, 8, 2)
    w, b = Parameter(rng.normal(size=(2, 2, 2, 3))), Parameter(rng.normal(size=3))
    coarse, _ = x.active.downsample()
    proj = _projection(rng, (len(coarse), 3))
    results.append(gradient_check('sparse_nn', 'strided_sparse_conv gradient',
                                  lambda: _scalar(L.strided_sparse_conv(x, w, b).features, proj),
                                  [x.features, w, b]))

    skip, low = random_map(rng, 8, 8, 2), random_map(rng, 4, 4, 3, density=0.5)
    proj = _projection(rng, (skip.n_active, 5))
    results.append(gradient_check('sparse_nn', 'upsample_concat gradient',
                                  lambda: _scalar(L.upsample_concat(low, skip).features, proj),
                                  [low.features, skip.features]))

    x = random_map(rng, 7, 7, 3, density=0.6)
    proj = _projection(rng, (x.n_active, 3))
    results.append(gradient_check('sparse_nn', 'sparse_avg_pool gradient',
                                  lambda: _scalar(L.sparse_avg_pool(x, 3).features, proj), [x.features]))

    for kind in ('relu', 'sigmoid', 'l2norm'):
        x = random_map(rng, 5, 5, 4, density=0.6)
        proj = _projection(rng, (x.n_active, 4))
        results.append(gradient_check('sparse_nn', f'pointwise {kind} gradient',
                                      lambda x=x, proj=proj, kind=kind: _scalar(L.pointwise(x, kind).features,
                                                                                   proj),
                                      [x.features]))

    q_map, k_map = random_map(rng, 4, 4, 3, density=0.5), random_map(rng, 4, 4, 3, density=0.5)
    att = L.Attention(rng, 3, 2)
    proj = _projection(rng, (q_map.n_active, 2))
    results.append(gradient_check('sparse_nn', 'attention gradient',
                                  lambda: _scalar(att(q_map, k_map, k_map).features, proj),
                                  [q_map.features, k_map.features] + att.parameters()))

    batch = Parameter(rng.normal(size=(5, 4)))
    mlp = L.MLP3(rng, (4, 6, 5, 3))
    proj = _projection(rng, (5, 3))
    results.append(gradient_check('sparse_nn', 'mlp3 gradient', lambda: _scalar(mlp(batch), proj),
                                  [batch] + mlp.parameters()))

    x = random_map(rng, 5, 5, 2, density=0.6)
    block = L.ResidualBlock(rng, 2)
    proj = _projection(rng, (x.n_active, 2))
    results.append(gradient_check('sparse_nn', 'residual block gradient',
                                  lambda: _scalar(block(x).features, proj), [x.features] + block.parameters()))
    return results


def head_gradient_suite(seed=2):
    rng = np.random.default_rng(seed)
    results = []
    f1 = random_map(rng, 6, 6, 3, density=0.6)
    grid = grid_for(f1.active, channels=4)
    w, b = Parameter(rng.normal(size=(1, 1, 3, 5))), Parameter(rng.normal(size=5))
    proj = _projection(rng, (f1.n_active, 5))
    results.append(gradient_check('model_heads', 'describe gradient',
                                  lambda: _scalar(heads.describe(f1, w, b).features, proj), [f1.features, w, b]))

    # channel_score needs a positive max per cell
    f1_pos = f1.with_features(Parameter(np.abs(f1.features.data)))
    w_pos, b_pos = Parameter(np.abs(w.data)), Parameter(np.abs(b.data) + 0.1)
    proj = _projection(rng, f1.n_active)
    results.append(gradient_check('model_heads', 'detection score gradient',
                                  lambda: _scalar(heads.saliency(heads.describe(f1_pos, w_pos, b_pos), grid, 3).score, proj),
                                  [f1_pos.features, w_pos, b_pos]))

    hw, hb = Parameter(rng.normal(size=(3, 3, 3, 4))), Parameter(rng.normal(size=4))
    results.append(gradient_check('model_heads', 'regress_heights gradient',
                                  lambda: _scalar(heads.regress_heights(f1, grid, hw, hb).z, proj),
                                  [f1.features, hw, hb]))

    e_p, e_q = random_map(rng, 4, 4, 4, density=0.5), random_map(rng, 4, 4, 4, density=0.5)
    head = OverlapHead(rng, 4)
    proj_p, proj_q = _projection(rng, e_p.n_active), _projection(rng, e_q.n_active)

    def overlap_projection():
        g_p, g_q = heads.overlap_head(e_p, e_q, head)
        return T.add(_scalar(g_p.gamma, proj_p), _scalar(g_q.gamma, proj_q))

    results.append(gradient_check('model_heads', 'overlap_head gradient', overlap_projection,
                                  [e_p.features, e_q.features] + head.parameters()))
    return results


def _samples(rng, n_p, n_q, anchors):
    out = []
    for anchor in rng.choice(n_p, size=anchors, replace=False):
        order = rng.permutation(n_q)
        pos, neg = np.sort(order[:2]), np.sort(order[2:5])
        out.append(losses.CorrespondenceSample(int(anchor), pos, neg, int(pos[0])))
    return out


def loss_gradient_suite(seed=3):
    rng = np.random.default_rng(seed)
    results = []
    feats_p, feats_q = Parameter(rng.normal(size=(6, 4))), Parameter(rng.normal(size=(7, 4)))
    samples = _samples(rng, 6, 7, 4)
    circle = losses.CircleParams(0.1, 1.4, 10.0)
    results.append(gradient_check(
        'losses', 'circle_loss gradient',
        lambda: losses.circle_loss(losses.pair_distances(samples, feats_p, feats_q), circle),
        [feats_p, feats_q]))

    s_anchor, s_match = Parameter(rng.uniform(0.5, 2.0, 4)), Parameter(rng.uniform(0.5, 2.0, 4))
    results.append(gradient_check(
        'losses', 'detection_loss gradient',
        lambda: losses.detection_loss(losses.pair_distances(samples, feats_p, feats_q), s_anchor, s_match),
        [feats_p, feats_q, s_anchor, s_match]))

    bev = BevConfig((0.0, 4.0, 0.0, 4.0, -1.0, 1.0), (4, 4, 4))
    coords_p = np.argwhere(rng.random((4, 4)) < 0.7)
    coords_q = np.argwhere(rng.random((4, 4)) < 0.7)
    z_p, z_q = Parameter(rng.uniform(-0.8, 0.8, len(coords_p))), Parameter(rng.uniform(-0.8, 0.8, len(coords_q)))
    reg_p = losses.RegressedCloud(coords_p, bev.cell_centers(coords_p), z_p)
    reg_q = losses.RegressedCloud(coords_q, bev.cell_centers(coords_q), z_q)
    raw_p = PointCloud(rng.uniform((0, 0, -1), (4, 4, 1), (20, 3)))
    raw_q = PointCloud(rng.uniform((0, 0, -1), (4, 4, 1), (20, 3)))
    gt = RigidTransform.from_yaw(0.2, (0.3, -0.2, 0.05))
    results.append(gradient_check('losses', 'regression_loss gradient',
                                  lambda: losses.regression_loss(reg_p, raw_p, reg_q, raw_q, gt, 1.5),
                                  [z_p, z_q]))

    logits = Parameter(rng.normal(size=9))
    labels = rng.integers(0, 2, 9)
    results.append(gradient_check('losses', 'bce_loss gradient',
                                  lambda: losses.bce_loss(T.sigmoid(logits), labels), [logits]))

    act_p, act_q = random_active(rng, 4, 4, 0.6), random_active(rng, 4, 4, 0.6)
    lg_p, lg_q = Parameter(rng.normal(size=len(act_p))), Parameter(rng.normal(size=len(act_q)))
    overlap_labels = losses.OverlapLabels(act_p.coords, rng.integers(0, 2, len(act_p)),
                                          act_q.coords, rng.integers(0, 2, len(act_q)))

    def classification():
        g_p, g_q = OverlapMap(act_p, T.sigmoid(lg_p)), OverlapMap(act_q, T.sigmoid(lg_q))
        return losses.classification_loss(g_p, g_q, overlap_labels,
                                          losses.pair_distances(samples, feats_p, feats_q), circle)

    results.append(gradient_check('losses', 'classification_loss gradient', classification,
                                  [lg_p, lg_q, feats_p, feats_q]))

    terms = {name: Parameter(rng.normal(size=3)) for name in losses.TERMS}
    weights = dict(zip(losses.TERMS, rng.uniform(0.1, 2.0, len(losses.TERMS))))
    results.append(gradient_check(
        'losses', 'total_loss gradient',
        lambda: losses.total_loss({n: T.total(T.mul(p, p)) for n, p in terms.items()}, weights),
        list(terms.values())))
    return results


def composed_gradient_check(seed=4, sample=2):
    """Whole-model check on a 16 x 16 synthetic scene pair, a seeded sample of entries per tensor."""
    run_config = TESTING_RUN_CONFIG
    data = run_config.data
    half = data.scene_half_size
    scene = generate_scene(data.seed, (-half, half, -half, half), SceneParams.from_config(data))
    pair = make_pair(scene, data.distances[1], data.seed + 1, ScanParams.from_config(data),
                     data.sensor_height, np.radians(data.heading_delta_deg), data.pose_margin)
    net = BevNet(run_config)
    weights = losses.loss_weights(run_config.loss)

    def build():
        return losses.total_loss(compute_parts(net, run_config, pair, seed, weights), weights)

    result = gradient_check('sparse_nn', 'composed model gradient', build, net.parameters(),
                            np.random.default_rng(seed), sample)
    return [result]


# Closed-form and robust registration

def kabsch_suite(seed=5, instances=1000):
    rng = np.random.default_rng(seed)
    rot_err = trans_err = 0.0
    for _ in range(instances):
        transform = RigidTransform.random(rng)
        q = rng.normal(scale=5.0, size=(int(rng.integers(3, 51)), 3))
        estimate = kabsch(transform.apply(q), q)
        rot_err = max(rot_err, float(np.abs(estimate.rotation - transform.rotation).max()))
        trans_err = max(trans_err, float(np.abs(estimate.translation - transform.translation).max()))
    return [SuiteResult('registration', 'kabsch recovers noiseless rotation', rot_err <= KABSCH_TOL, rot_err,
                        f'{instances} instances'),
            SuiteResult('registration', 'kabsch recovers noiseless translation', trans_err <= KABSCH_TOL,
                        trans_err, f'{instances} instances')]


def ransac_suite(seed=6, trials=100, size=200, iterations=10000):
    """30% inliers with 0.05 m noise among uniform outliers; 99 of 100 trials must land."""
    rng = np.random.default_rng(seed)
    good, worst_rte, worst_rre = 0, 0.0, 0.0
    for trial in range(trials):
        transform = RigidTransform.random(rng)
        q = rng.uniform(-20.0, 20.0, (size, 3))
        p = transform.apply(q)
        n_in = int(round(0.3 * size))
        p[:n_in] += rng.normal(scale=0.05, size=(n_in, 3))
        p[n_in:] = rng.uniform(-20.0, 20.0, (size - n_in, 3)) + transform.translation
        result = ransac(p, q, iterations, 0.25, seed=int(rng.integers(1 << 31)), early_exit_ratio=0.9)
        rte, rre = pose_errors(result.transform, transform)
        worst_rte, worst_rre = max(worst_rte, rte), max(worst_rre, rre)
        good += result.success and rte < 0.1 and rre < 0.5
    return [SuiteResult('registration', 'ransac recovers 30% inlier sets', good >= 0.99 * trials,
                        float(trials - good), f'{good}/{trials} trials, worst rte {worst_rte:.3f} m')]


# Dense oracles

def dense_submanifold(dense, mask, weight, bias):
    k = weight.shape[0]
    r = k // 2
    height, width, _ = dense.shape
    padded = np.pad(dense * mask[..., None], ((r, r), (r, r), (0, 0)))
    out = np.zeros((height, width, weight.shape[3]))
    for a in range(k):
        for b in range(k):
            out += padded[a:a + height, b:b + width] @ weight[a, b]
    return (out + bias)[mask]


def dense_strided(dense, mask, weight, bias):
    height, width, _ = dense.shape
    masked = dense * mask[..., None]
    out = np.zeros((height // 2, width // 2, weight.shape[3]))
    for a in range(2):
        for b in range(2):
            out += masked[a::2, b::2] @ weight[a, b]
    coarse = mask.reshape(height // 2, 2, width // 2, 2).any(axis=(1, 3))
    return (out + bias)[coarse]


def dense_attention(queries, keys, values, wq, wk, wv):
    q, k, v = queries @ wq, keys @ wk, values @ wv
    logits = q @ k.T / np.sqrt(q.shape[1])
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (weights / weights.sum(axis=1, keepdims=True)) @ v


def oracle_suite(seed=7, instances=5):
    rng = np.random.default_rng(seed)
    worst = {'conv1': 0.0, 'conv3': 0.0, 'conv5': 0.0, 'strided': 0.0, 'attention': 0.0}
    for _ in range(instances):
        dense = rng.normal(size=(8, 8, 3))
        active = random_active(rng, 8, 8)
        mask = active.index_grid >= 0
        x = SparseFeatureMap.from_dense(dense, mask)
        for k in (1, 3, 5):
            weight, bias = Parameter(rng.normal(size=(k, k, 3, 4))), Parameter(rng.normal(size=4))
            sparse_out = L.submanifold_conv(x, weight, bias).features.data
            residual = np.abs(sparse_out - dense_submanifold(dense, mask, weight.data, bias.data)).max()
            worst[f'conv{k}'] = max(worst[f'conv{k}'], float(residual))
        weight, bias = Parameter(rng.normal(size=(2, 2, 3, 4))), Parameter(rng.normal(size=4))
        sparse_out = L.strided_sparse_conv(x, weight, bias).features.data
        residual = np.abs(sparse_out - dense_strided(dense, mask, weight.data, bias.data)).max()
        worst['strided'] = max(worst['strided'], float(residual))
        q_map, k_map = random_map(rng, 5, 5, 4), random_map(rng, 5, 5, 4)
        att = L.Attention(rng, 4, 3)
        out = att(q_map, k_map, k_map).features.data
        p = att.params
        expected = dense_attention(q_map.features.data, k_map.features.data, k_map.features.data,
                                   p['wq'].data, p['wk'].data, p['wv'].data)
        worst['attention'] = max(worst['attention'], float(np.abs(out - expected).max()))
    names = {'conv1': 'submanifold_conv k=1 equals dense conv', 'conv3': 'submanifold_conv k=3 equals dense conv',
             'conv5': 'submanifold_conv k=5 equals dense conv', 'strided': 'strided conv equals dense strided conv',
             'attention': 'attention equals dense attention'}
    return [SuiteResult('sparse_nn', names[key], value <= ORACLE_TOL, value, f'{instances} instances')
            for key, value in worst.items()]


SUITES = {
    'saliency': saliency_suite,
    'layers': layer_gradient_suite,
    'heads': head_gradient_suite,
    'losses': loss_gradient_suite,
    'composed': composed_gradient_check,
    'kabsch': kabsch_suite,
    'ransac': ransac_suite,
    'oracles': oracle_suite,
}

GRADIENT_SUITES = ('layers', 'heads', 'losses', 'composed')


def run_all(names=None):
    """Run the named suites (all by default) and return every SuiteResult."""
    results = []
    for name in names or SUITES:
        start = time.perf_counter()
        suite = SUITES[name]()
        logger.info(f"suite {name}: {sum(r.passed for r in suite)}/{len(suite)} passed "
                    f"in {time.perf_counter() - start:.1f}s")
        results.extend(suite)
    return results


def require_all_passed(results):
    """
    Raises:
        VerificationError: listing module, property and residual of each failure
    """
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationError('; '.join(r.line() for r in failed))
