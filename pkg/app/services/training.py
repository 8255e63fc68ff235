import time
from pathlib import Path

import numpy as np
from flask import current_app
from tqdm import tqdm

from app.models.bev import voxelize
from app.nn import tensor as T
from app.nn.checkpoint import load_checkpoint, save_checkpoint
from app.nn.optim import Adam
from app.services import losses
from app.services.heads import forward_cloud, overlap_head
from app.services.network import BevNet
from app.utils.errors import DegenerateFeatureError, EmptyInputError, InputOutputError, NoOverlapError

LOG_COLUMNS = ('step',) + losses.TERMS + ('total', 'wall')


def _seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _gather(values, index):
    return T.take_rows(values, np.asarray(index, dtype=np.int64))


def _truncate_log(log_path, step):
    """Drop log lines past `step` so a resumed run does not repeat them."""
    lines = log_path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [line for line in lines[1:] if line.strip() and int(line.split(',', 1)[0]) <= step]
    log_path.write_text(''.join(kept))
    return bool(kept)


def compute_parts(net, run_config, pair, seed, weights):
    """
    Forward both clouds and evaluate every enabled loss term.

    Returns:
        dict: term name -> scalar Tensor (terms with zero weight are absent)

    Raises:
        NoOverlapError: the fine clouds share no correspondence
        DegenerateFeatureError: a descriptor cell has no positive entry
    """
    bev = run_config.bev
    cfg = run_config.loss
    on = {name for name, w in weights.items() if w != 0}
    grid_p, grid_q = voxelize(pair.cloud_p, bev), voxelize(pair.cloud_q, bev)
    if grid_p.pillar_count == 0 or grid_q.pillar_count == 0:
        raise EmptyInputError("a training cloud has no points inside the grid")
    out_p, out_q = forward_cloud(net, grid_p), forward_cloud(net, grid_q)
    reg_p = losses.RegressedCloud.from_heights(out_p.heights, bev)
    reg_q = losses.RegressedCloud.from_heights(out_q.heights, bev)
    gt, r_p, r_s = pair.gt, run_config.positive_radius, run_config.safe_radius
    parts = {}

    if on & {'desc', 'det'}:
        circle = losses.CircleParams(cfg.delta_p, cfg.delta_n, cfg.circle_scale)
        fwd = losses.sample_correspondences(reg_p.points(), reg_q.points(), gt, cfg.anchors,
                                            r_p, r_s, cfg.max_negatives, _seed(seed, 1))
        rev = losses.sample_correspondences(reg_q.points(), reg_p.points(), gt.inverse(), cfg.anchors,
                                            r_p, r_s, cfg.max_negatives, _seed(seed, 2))
        feats_p, feats_q = out_p.descriptors.features, out_q.descriptors.features
        d_fwd = losses.pair_distances(fwd, feats_p, feats_q)
        d_rev = losses.pair_distances(rev, feats_q, feats_p)
        if 'desc' in on:
            parts['desc'] = T.mul(T.add(losses.circle_loss(d_fwd, circle), losses.circle_loss(d_rev, circle)), 0.5)
        if 'det' in on:
            s_p, s_q = out_p.saliency.score, out_q.saliency.score
            det_fwd = losses.detection_loss(d_fwd, _gather(s_p, [s.anchor for s in fwd]),
                                            _gather(s_q, [s.match for s in fwd]))
            det_rev = losses.detection_loss(d_rev, _gather(s_q, [s.anchor for s in rev]),
                                            _gather(s_p, [s.match for s in rev]))
            parts['det'] = T.mul(T.add(det_fwd, det_rev), 0.5)

    if 'reg' in on:
        parts['reg'] = losses.regression_loss(reg_p, pair.cloud_p, reg_q, pair.cloud_q, gt, r_p)

    if on & {'bce', 'sg'}:
        stride = run_config.deep_stride
        src_p, src_q = out_p.overlap_source, out_q.overlap_source
        if 'bce' in on:
            g_p, g_q = overlap_head(src_p, src_q, net.children['overlap'])
            labels = losses.make_overlap_labels(grid_p, grid_q, gt, stride, pair.cloud_p, pair.cloud_q)
            parts['bce'] = losses.classification_loss(g_p, g_q, labels)
        if 'sg' in on:
            circle = losses.CircleParams(cfg.delta_p, cfg.delta_n, cfg.circle_scale)
            deep_p = np.column_stack([bev.cell_centers(src_p.coords, stride), np.zeros(src_p.n_active)])
            deep_q = np.column_stack([bev.cell_centers(src_q.coords, stride), np.zeros(src_q.n_active)])
            try:
                deep = losses.sample_correspondences(deep_p, deep_q, gt, cfg.deep_anchors, stride * r_p,
                                                     stride * r_s, cfg.max_negatives, _seed(seed, 3))
            except NoOverlapError:
                current_app.logger.debug("no deep correspondences for this pair, skipping the deep circle term")
            else:
                d_deep = losses.pair_distances(deep, T.normalize_rows(src_p.features, eps=1e-12),
                                               T.normalize_rows(src_q.features, eps=1e-12))
                parts['sg'] = losses.circle_loss(d_deep, circle)
    return parts


class Trainer:
    """Adam training over a list of ScanPairs with resumable checkpoints."""

    def __init__(self, run_config, net=None):
        train = run_config.train
        self.run_config = run_config
        self.net = net or BevNet(run_config)
        self.optimizer = Adam(self.net.parameters(), train.lr, (train.beta1, train.beta2), train.eps)
        self.weights = losses.loss_weights(run_config.loss)
        self.step = 0

    def pair_for_step(self, pairs, step):
        """Pairs are visited in a fresh seeded permutation every epoch."""
        epoch, offset = divmod(step - 1, len(pairs))
        order = np.random.default_rng(_seed(self.run_config.train.seed, epoch, 7)).permutation(len(pairs))
        return pairs[order[offset]]

    def train_step(self, pair, step):
        """
        One optimizer update.

        Returns:
            dict: float value of each term and the total, or None when the pair was skipped
        """
        try:
            parts = compute_parts(self.net, self.run_config, pair, _seed(self.run_config.train.seed, step),
                                  self.weights)
        except (NoOverlapError, DegenerateFeatureError) as e:
            current_app.logger.warning(f"step {step}: skipping pair ({e})")
            return None
        total = losses.total_loss(parts, self.weights, step)
        if not total.is_leaf:
            T.backward(total, self.optimizer.params)
        self.optimizer.step()
        values = {name: (parts[name].item() if name in parts else 0.0) for name in losses.TERMS}
        values['total'] = total.item()
        return values

    def state(self):
        blobs = {}
        for name, p in self.net.named_parameters():
            blobs[name] = p.data
            blobs[f'{name}#adam_m'] = p.adam_m
            blobs[f'{name}#adam_v'] = p.adam_v
        blobs['optimizer.step_count'] = np.array([self.optimizer.step_count], dtype=np.float64)
        blobs['trainer.step'] = np.array([self.step], dtype=np.float64)
        return blobs

    def save(self, path):
        save_checkpoint(path, self.state(), self.run_config.digest())
        current_app.logger.info(f"checkpoint at step {self.step} written to {path}")

    def load(self, path):
        blobs = load_checkpoint(path, self.run_config.digest())
        self.net.load_state_dict(blobs)
        for name, p in self.net.named_parameters():
            p.adam_m = blobs.get(f'{name}#adam_m', np.zeros_like(p.data)).copy()
            p.adam_v = blobs.get(f'{name}#adam_v', np.zeros_like(p.data)).copy()
            p.zero_grad()
        self.optimizer.step_count = int(blobs.get('optimizer.step_count', [0])[0])
        self.step = int(blobs.get('trainer.step', [0])[0])

    def run(self, pairs, log_path, checkpoint_path=None, steps=None, resume=False, progress=True):
        """
        Train up to `steps` (default: the configured count), appending one CSV line per update.

        With `resume` the trainer continues from the checkpoint's step.
        """
        if not pairs:
            raise EmptyInputError("training needs at least one pair")
        train = self.run_config.train
        steps = train.steps if steps is None else steps
        if resume and checkpoint_path and Path(checkpoint_path).exists():
            self.load(checkpoint_path)
            current_app.logger.info(f"resuming from step {self.step}")
        log_path = Path(log_path)
        mode = 'a' if resume and log_path.exists() else 'w'
        start = time.perf_counter()
        try:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            if mode == 'a' and not _truncate_log(log_path, self.step):
                mode = 'w'
            with log_path.open(mode) as log:
                if mode == 'w':
                    log.write(','.join(LOG_COLUMNS) + '\n')
                for step in tqdm(range(self.step + 1, steps + 1), disable=not progress, desc='train'):
                    values = self.train_step(self.pair_for_step(pairs, step), step)
                    self.step = step
                    if values is not None:
                        wall = time.perf_counter() - start if train.log_wall_time else 0.0
                        terms = ','.join(f'{values[name]:.10g}' for name in losses.TERMS + ('total',))
                        log.write(f'{step},{terms},{wall:.3f}\n')
                        log.flush()
                    if checkpoint_path and step % train.checkpoint_every == 0:
                        self.save(checkpoint_path)
        except OSError as e:
            raise InputOutputError(log_path, e.strerror or str(e)) from e
        if checkpoint_path and self.step % train.checkpoint_every:
            self.save(checkpoint_path)
        return self.step
