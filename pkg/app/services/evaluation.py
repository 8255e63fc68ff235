"""Overlap, registration and loop-closure metrics, and the metrics report writer."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.services.heads import similarity
from app.services.losses import make_overlap_labels
from app.utils.errors import EmptyInputError, InputOutputError, ShapeError

logger = logging.getLogger(__name__)

UNDEFINED = 'undefined'


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class OverlapMetrics:
    """Confusion counts over active cells; None marks an empty denominator."""
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def iou(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    def to_dict(self):
        return {'iou': self.iou, 'precision': self.precision, 'recall': self.recall}


@dataclass(frozen=True)
class RegistrationMetrics:
    rte: float
    rre: float
    success: bool = True

    def passed(self, rte_threshold=2.0, rre_threshold=5.0):
        return self.success and self.rte < rte_threshold and self.rre < rre_threshold


def overlap_metrics(scores, labels, coords=None, label_coords=None, threshold=0.5):
    """
    Confusion counts of `scores >= threshold` against binary labels.

    Raises:
        ShapeError: the two sides cover different cells
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape or (
            coords is not None and label_coords is not None and not np.array_equal(coords, label_coords)):
        raise ShapeError("predicted and labelled active sets differ")
    pred = scores >= threshold
    return OverlapMetrics(
        tp=int(np.count_nonzero(pred & labels)),
        fp=int(np.count_nonzero(pred & ~labels)),
        fn=int(np.count_nonzero(~pred & labels)),
        tn=int(np.count_nonzero(~pred & ~labels))
    )


def mean_defined(values):
    """Mean over the values that are not None; None when none are defined."""
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def pose_errors(estimate, gt):
    """(rte in meters, rre in degrees) between two transforms."""
    rte = float(np.linalg.norm(estimate.translation - gt.translation))
    cos = (np.trace(gt.rotation.T @ estimate.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return rte, rre


def registration_recall(results, rte_threshold=2.0, rre_threshold=5.0):
    """Fraction of pairs with rte < threshold and rre < threshold; failures count as misses."""
    results = list(results)
    if not results:
        raise EmptyInputError("registration recall needs at least one pair")
    return sum(r.passed(rte_threshold, rre_threshold) for r in results) / len(results)


@dataclass(frozen=True)
class LoopClosureResult:
    recall: float
    queries: int
    selections: dict


def recall_at_1(poses, score, exclusion_window, success_radius):
    """
    Top-1 retrieval recall over a trajectory.

    A frame qualifies as a query when some frame farther than `exclusion_window`
    indices lies within `success_radius`. Every such candidate frame is scored
    with `score(query, candidate)`; the query is correct when the best one lies
    within the radius. Ties go to the lower frame index.
    """
    centers = np.array([p.translation for p in poses]).reshape(-1, 3)
    n = centers.shape[0]
    if n <= exclusion_window:
        raise EmptyInputError(f"sequence of {n} frames is not longer than the exclusion window")
    correct, selections = 0, {}
    for q in range(n):
        candidates = np.flatnonzero(np.abs(np.arange(n) - q) > exclusion_window)
        dist = np.linalg.norm(centers[candidates] - centers[q], axis=1)
        if not np.any(dist < success_radius):
            continue
        values = np.array([score(q, int(c)) for c in candidates])
        best = int(candidates[int(np.argmax(values))])
        selections[q] = best
        correct += np.linalg.norm(centers[best] - centers[q]) < success_radius
    if not selections:
        raise EmptyInputError("no query has a true loop candidate")
    return LoopClosureResult(correct / len(selections), len(selections), selections)


def pair_retrieval_recall(rows):
    """
    Per bucket, the fraction of queries whose true partner scores above every distractor.

    Args:
        rows: iterable of (bucket label, true score, sequence of distractor scores)
    """
    hits = {}
    for bucket, true_score, distractors in rows:
        won = all(true_score > d for d in distractors)
        total, count = hits.get(bucket, (0, 0))
        hits[bucket] = (total + 1, count + int(won))
    return {bucket: count / total for bucket, (total, count) in hits.items()}


def threshold_sweep(scores, labels, cuts):
    """(cut, precision, recall) for each cut of a score-as-classifier rule."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    out = []
    for cut in cuts:
        m = overlap_metrics(scores, labels, threshold=cut)
        out.append((float(cut), m.precision, m.recall))
    return out


def bucket_label(distance, edges):
    """'lo-hi' for the half-open bucket holding `distance`, None outside all buckets."""
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo <= distance < hi:
            return f'{lo:g}-{hi:g}'
    return None


def _cell(value):
    if value is None:
        return UNDEFINED
    if isinstance(value, float):
        return f'{value:.6f}'
    return str(value)


def format_table(rows, columns):
    """Comma-separated table: header then one line per row dict."""
    lines = [','.join(columns)]
    lines.extend(','.join(_cell(row.get(c)) for c in columns) for row in rows)
    return '\n'.join(lines) + '\n'


def write_report(directory, name, rows, columns, summary):
    """Write `<name>.csv` and `summary.txt` (key=value lines) under `directory`."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f'{name}.csv').write_text(format_table(rows, columns))
        (directory / 'summary.txt').write_text(''.join(f'{k}={_cell(v)}\n' for k, v in summary.items()))
    except OSError as e:
        raise InputOutputError(directory, e.strerror or str(e)) from e
    logger.info(f"wrote {name} report with {len(rows)} rows to {directory}")


# Protocols over a loaded pipeline

OVERLAP_COLUMNS = ('bucket', 'pairs', 'iou', 'precision', 'recall')
REGISTRATION_COLUMNS = ('bucket', 'pairs', 'recall', 'rte', 'rre', 'failures')
LOOP_COLUMNS = ('bucket', 'queries', 'recall')


def _bucketed(pairs, edges):
    groups = {}
    for pair in pairs:
        label = bucket_label(pair.distance, edges)
        if label is None:
            logger.warning(f"pair at {pair.distance:.2f} m lies outside every bucket, skipped")
            continue
        groups.setdefault(label, []).append(pair)
    order = [bucket_label(lo, edges) for lo in edges[:-1]]
    return {label: groups[label] for label in order if label in groups}


def evaluate_overlap(service, pairs, oracle=False):
    """
    Overlap IOU, precision and recall per distance bucket, both clouds of every pair counted.

    With `oracle` the labels themselves are scored. The summary also carries
    precision and recall of every `eval.overlap_cuts` threshold over all cells.
    """
    run_config = service.run_config
    rows, everything = [], []
    pooled_scores, pooled_labels = [], []
    for label, group in _bucketed(pairs, run_config.eval.buckets).items():
        metrics = []
        for pair in group:
            out_p, out_q = service.infer(pair.cloud_p), service.infer(pair.cloud_q)
            g_p, g_q = service.overlap(out_p, out_q)
            labels = make_overlap_labels(out_p.grid, out_q.grid, pair.gt, run_config.deep_stride,
                                         pair.cloud_p, pair.cloud_q)
            for g, cell_labels, coords in ((g_p, labels.labels_p, labels.coords_p),
                                           (g_q, labels.labels_q, labels.coords_q)):
                scores = cell_labels if oracle else g.scores
                metrics.append(overlap_metrics(scores, cell_labels, g.active.coords, coords,
                                               run_config.model.overlap_threshold))
                pooled_scores.append(np.asarray(scores, dtype=np.float64))
                pooled_labels.append(np.asarray(cell_labels))
        everything.extend(metrics)
        rows.append({'bucket': label, 'pairs': len(group), 'iou': mean_defined(m.iou for m in metrics),
                     'precision': mean_defined(m.precision for m in metrics),
                     'recall': mean_defined(m.recall for m in metrics)})
    summary = {'protocol': 'overlap', 'pairs': sum(r['pairs'] for r in rows),
               'iou': mean_defined(m.iou for m in everything),
               'precision': mean_defined(m.precision for m in everything),
               'recall': mean_defined(m.recall for m in everything)}
    if pooled_scores:
        sweep = threshold_sweep(np.concatenate(pooled_scores), np.concatenate(pooled_labels),
                                run_config.eval.overlap_cuts)
        for cut, precision, recall in sweep:
            summary[f'precision@{cut:g}'] = precision
            summary[f'recall@{cut:g}'] = recall
    return rows, OVERLAP_COLUMNS, summary


def evaluate_registration(service, pairs, oracle=False, no_overlap_filter=False):
    """
    Registration recall per bucket; RTE and RRE are averaged over the pairs that pass.

    With `oracle` the ground truth is reported as the estimate.
    """
    run_config = service.run_config
    thresholds = (run_config.eval.rte_threshold, run_config.eval.rre_threshold)
    rows, everything = [], []
    for label, group in _bucketed(pairs, run_config.eval.buckets).items():
        results = []
        for pair in group:
            if oracle:
                estimate, success = pair.gt, True
            else:
                report = service.register(pair.cloud_p, pair.cloud_q, no_overlap_filter=no_overlap_filter)
                estimate, success = report.result.transform, report.result.success
            results.append(RegistrationMetrics(*pose_errors(estimate, pair.gt), success))
        everything.extend(results)
        passed = [r for r in results if r.passed(*thresholds)]
        rows.append({'bucket': label, 'pairs': len(group), 'recall': registration_recall(results, *thresholds),
                     'rte': mean_defined(r.rte for r in passed), 'rre': mean_defined(r.rre for r in passed),
                     'failures': sum(not r.success for r in results)})
    passed = [r for r in everything if r.passed(*thresholds)]
    summary = {'protocol': 'registration', 'pairs': len(everything),
               'recall': registration_recall(everything, *thresholds) if everything else None,
               'rte': mean_defined(r.rte for r in passed), 'rre': mean_defined(r.rre for r in passed),
               'no_overlap_filter': str(no_overlap_filter).lower()}
    return rows, REGISTRATION_COLUMNS, summary


def evaluate_loop_closure(service, clouds, poses, oracle=False):
    """
    Recall@1 over a trajectory plus per-bucket pair retrieval.

    Candidates are scored with tau; with `oracle` the negated pose distance is
    used instead.
    """
    run_config = service.run_config
    window, radius = run_config.eval.exclusion_window, run_config.eval.success_radius
    centers = np.array([p.translation for p in poses]).reshape(-1, 3)
    outputs = {}
    cache = {}

    def score(q, c):
        if oracle:
            return -float(np.linalg.norm(centers[q] - centers[c]))
        if (q, c) not in cache:
            for n in (q, c):
                if n not in outputs:
                    outputs[n] = service.infer(clouds[n])
            cache[(q, c)] = similarity(*service.overlap(outputs[q], outputs[c]))
        return cache[(q, c)]

    result = recall_at_1(poses, score, window, radius)
    retrieval = []
    for q in result.selections:
        candidates = np.flatnonzero(np.abs(np.arange(len(poses)) - q) > window)
        dist = np.linalg.norm(centers[candidates] - centers[q], axis=1)
        partner = int(candidates[int(np.argmin(dist))])
        bucket = bucket_label(float(dist.min()), run_config.eval.buckets)
        if bucket is None:
            continue
        distractors = [score(q, int(c)) for c, d in zip(candidates, dist) if d >= radius]
        retrieval.append((bucket, score(q, partner), distractors))
    counts = {}
    for bucket, _, _ in retrieval:
        counts[bucket] = counts.get(bucket, 0) + 1
    rows = [{'bucket': 'all', 'queries': result.queries, 'recall': result.recall}]
    rows.extend({'bucket': bucket, 'queries': counts[bucket], 'recall': value}
                for bucket, value in pair_retrieval_recall(retrieval).items())
    summary = {'protocol': 'loopclosure', 'frames': len(poses), 'queries': result.queries,
               'recall_at_1': result.recall, 'exclusion_window': window, 'success_radius': radius}
    return rows, LOOP_COLUMNS, summary
