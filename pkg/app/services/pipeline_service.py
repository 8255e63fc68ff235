from dataclasses import dataclass

import numpy as np
from flask import current_app

from app.models.bev import voxelize
from app.models.geometry import PointCloud, RigidTransform
from app.nn.checkpoint import load_checkpoint
from app.services.heads import extract_keypoints, forward_cloud, overlap_head, similarity
from app.services.network import BevNet
from app.services.registration import RegistrationResult, match, ransac_register
from app.utils.errors import EmptyInputError, InsufficientDataError


@dataclass(frozen=True, eq=False)
class RegistrationReport:
    """Outcome of one full pipeline run on a cloud pair."""
    result: RegistrationResult
    tau: float
    keypoints_p: list
    keypoints_q: list

    def to_dict(self):
        report = self.result.to_dict()
        report.update(tau=self.tau, keypoints_p=len(self.keypoints_p), keypoints_q=len(self.keypoints_q))
        return report

    def lines(self):
        r = self.result
        return [
            f'transform={r.to_record()}',
            f'inliers={r.inliers.size}',
            f'correspondences={r.correspondences}',
            f'inlier_ratio={r.inlier_ratio:.6f}',
            f'iterations={r.iterations}',
            f'keypoints={len(self.keypoints_p)},{len(self.keypoints_q)}',
            f'tau={self.tau:.6f}',
            f'success={str(r.success).lower()}'
        ]


class PipelineService:
    """Voxelize -> backbone -> heads -> keypoints -> matching -> RANSAC, on one loaded model."""

    _instance = None

    @classmethod
    def get_instance(cls):
        """Get or create the singleton built from the current app's config."""
        if cls._instance is None:
            cls._instance = cls(current_app.config['RUN_CONFIG'], current_app.config.get('BEVREG_CHECKPOINT'))
        return cls._instance

    @classmethod
    def reset_instance(cls):
        cls._instance = None

    def __init__(self, run_config, checkpoint=None):
        """
        Args:
            run_config (RunConfig): settings the model was trained with
            checkpoint (str): checkpoint path; fresh seeded weights when empty
        """
        self.run_config = run_config
        self.net = BevNet(run_config)
        if checkpoint:
            self.net.load_state_dict(load_checkpoint(checkpoint, run_config.digest()))
            current_app.logger.info(f"Loaded model weights from {checkpoint}")
        else:
            current_app.logger.warning("No checkpoint configured, using freshly initialized weights")

    def infer(self, cloud):
        """
        Heads of one cloud.

        Raises:
            EmptyInputError: the cloud has no point inside the grid extent
        """
        if cloud.is_empty:
            raise EmptyInputError("point cloud is empty")
        grid = voxelize(cloud, self.run_config.bev)
        if grid.pillar_count == 0:
            raise EmptyInputError("no point of the cloud lies inside the grid extent")
        return forward_cloud(self.net, grid)

    def overlap(self, out_p, out_q):
        return overlap_head(out_p.overlap_source, out_q.overlap_source, self.net.children['overlap'])

    def similarity(self, cloud_p, cloud_q):
        """tau of a cloud pair."""
        g_p, g_q = self.overlap(self.infer(cloud_p), self.infer(cloud_q))
        return similarity(g_p, g_q)

    def keypoints(self, out, overlap_map, no_overlap_filter=False, max_keypoints=None):
        model = self.run_config.model
        k = model.max_keypoints if max_keypoints is None else max_keypoints
        threshold = 0.0 if no_overlap_filter else model.overlap_threshold
        return extract_keypoints(out.saliency.score, out.heights, out.descriptors, overlap_map, k,
                                 threshold, self.run_config.bev, self.run_config.deep_stride)

    def register(self, cloud_p, cloud_q, no_overlap_filter=False, max_keypoints=None, seed=None):
        """
        Estimate the transform mapping Q onto P.

        Returns:
            RegistrationReport: success is False when too few keypoints or inliers survive
        """
        ransac = self.run_config.ransac
        out_p, out_q = self.infer(cloud_p), self.infer(cloud_q)
        g_p, g_q = self.overlap(out_p, out_q)
        tau = similarity(g_p, g_q)
        kp_p = self.keypoints(out_p, g_p, no_overlap_filter, max_keypoints)
        kp_q = self.keypoints(out_q, g_q, no_overlap_filter, max_keypoints)
        cs = None
        try:
            cs = match(kp_p, kp_q)
            result = ransac_register(cs, kp_p, kp_q, ransac.max_iterations, ransac.inlier_radius,
                                     ransac.seed if seed is None else seed, ransac.early_exit_ratio,
                                     ransac.batch)
        except (EmptyInputError, InsufficientDataError) as e:
            current_app.logger.warning(f"Registration failed: {e}")
            result = RegistrationResult(RigidTransform.identity(), np.zeros(0, dtype=np.int64),
                                        0 if cs is None else len(cs), 0, False)
        current_app.logger.info(
            f"Registered pair: {result.inliers.size}/{result.correspondences} inliers, tau={tau:.4f}")
        return RegistrationReport(result, tau, kp_p, kp_q)


def get_pipeline_service():
    """Get the pipeline service instance."""
    return PipelineService.get_instance()


def as_cloud(points):
    """PointCloud from a nested (N, 3) list, e.g. a request body field."""
    return PointCloud(np.asarray(points, dtype=np.float64))
