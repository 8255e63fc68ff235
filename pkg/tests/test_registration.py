import numpy as np
import pytest

from app.models.geometry import RigidTransform
from app.models.keypoint import Keypoint
from app.services import registration
from app.utils.errors import DegenerateConfigurationError, EmptyInputError, InsufficientDataError


@pytest.fixture
def rng():
    return np.random.default_rng(21)


def test_mutual_nearest_keeps_symmetric_pairs():
    """Only pairs that pick each other survive."""
    desc_p = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    desc_q = np.array([[0.0, 1.0], [1.0, 0.0]])
    cs = registration.mutual_nearest(desc_p, desc_q)
    assert list(zip(cs.idx_p, cs.idx_q)) == [(0, 1), (1, 0)]
    np.testing.assert_allclose(cs.distances, 0.0)


def test_mutual_nearest_needs_both_sides():
    """An empty descriptor set cannot be matched."""
    with pytest.raises(EmptyInputError):
        registration.mutual_nearest(np.zeros((0, 3)), np.eye(3))


def test_match_reads_keypoint_descriptors():
    """Keypoints with identical descriptors pair up by position in the list."""
    eye = np.eye(3)
    kp_p = [Keypoint((float(n), 0.0, 0.0), 1.0, eye[n]) for n in range(3)]
    kp_q = [Keypoint((0.0, float(n), 0.0), 1.0, eye[2 - n]) for n in range(3)]
    cs = registration.match(kp_p, kp_q)
    assert list(zip(cs.idx_p, cs.idx_q)) == [(0, 2), (1, 1), (2, 0)]


def test_kabsch_recovers_transform(rng):
    """Noise-free correspondences give back the transform to 1e-9."""
    t = RigidTransform.random(rng)
    q = rng.normal(scale=5.0, size=(30, 3))
    estimate = registration.kabsch(t.apply(q), q)
    np.testing.assert_allclose(estimate.as_matrix(), t.as_matrix(), atol=1e-9)


def test_kabsch_weights_ignore_outliers(rng):
    """Zero-weighted pairs do not move the estimate."""
    t = RigidTransform.random(rng)
    q = rng.normal(size=(10, 3))
    p = t.apply(q)
    p[-2:] += 50.0
    weights = np.r_[np.ones(8), 0.0, 0.0]
    estimate = registration.kabsch(p, q, weights)
    np.testing.assert_allclose(estimate.as_matrix(), t.as_matrix(), atol=1e-9)


def test_kabsch_rejects_degenerate_sets():
    """Two pairs are too few and collinear points are rank deficient."""
    with pytest.raises(InsufficientDataError):
        registration.kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateConfigurationError):
        registration.kabsch(line, line)


def test_kabsch_never_returns_a_reflection(rng):
    """Mirrored data still yields a proper rotation."""
    q = rng.normal(size=(12, 3))
    p = q * np.array([1.0, 1.0, -1.0])
    estimate = registration.kabsch(p, q)
    assert np.linalg.det(estimate.rotation) == pytest.approx(1.0)


def test_ransac_exact_correspondences(rng):
    """Clean correspondences are solved with every pair an inlier."""
    t = RigidTransform.random(rng)
    q = rng.uniform(-20, 20, size=(40, 3))
    result = registration.ransac(t.apply(q), q, 100, 0.1, seed=0)
    assert result.success
    assert result.inliers.size == 40
    assert result.iterations == 1
    np.testing.assert_allclose(result.transform.as_matrix(), t.as_matrix(), atol=1e-8)


def test_ransac_with_outliers(rng):
    """A 40% inlier set is still registered."""
    t = RigidTransform.random(rng)
    q = rng.uniform(-20, 20, size=(50, 3))
    p = t.apply(q)
    p[20:] = rng.uniform(-20, 20, size=(30, 3))
    result = registration.ransac(p, q, 2000, 0.3, seed=4)
    assert result.success
    assert set(range(20)) <= set(result.inliers.tolist())
    np.testing.assert_allclose(result.transform.translation, t.translation, atol=1e-6)


def test_ransac_is_deterministic(rng):
    """One seed gives one answer and runs every iteration without early exit."""
    t = RigidTransform.random(rng)
    q = rng.uniform(-10, 10, size=(30, 3))
    p = t.apply(q)
    p[10:] += rng.normal(scale=5.0, size=(20, 3))
    a = registration.ransac(p, q, 300, 0.2, seed=9, early_exit_ratio=1.1, batch=7)
    b = registration.ransac(p, q, 300, 0.2, seed=9, early_exit_ratio=1.1, batch=7)
    np.testing.assert_array_equal(a.inliers, b.inliers)
    np.testing.assert_allclose(a.transform.as_matrix(), b.transform.as_matrix())
    assert a.iterations == b.iterations == 300


def test_ransac_failure_on_noise(rng):
    """Unrelated point sets leave fewer than three inliers."""
    p = rng.uniform(-100, 100, size=(6, 3))
    q = rng.uniform(-100, 100, size=(6, 3))
    result = registration.ransac(p, q, 50, 1e-6, seed=0)
    assert not result.success
    assert result.iterations == 50


def test_ransac_needs_three_pairs():
    """Fewer than three correspondences raise."""
    with pytest.raises(InsufficientDataError):
        registration.ransac(np.zeros((2, 3)), np.zeros((2, 3)), 10, 0.5, seed=0)


def test_ransac_register_uses_correspondence_indices(rng):
    """Keypoints are reordered by the correspondence set before solving."""
    t = RigidTransform.from_yaw(0.3, (1.0, -2.0, 0.0))
    q = rng.uniform(-10, 10, size=(8, 3))
    p = t.apply(q)
    perm = rng.permutation(8)
    desc = np.eye(8)
    kp_p = [Keypoint(p[n], 1.0, desc[n]) for n in perm]
    kp_q = [Keypoint(q[n], 1.0, desc[n]) for n in range(8)]
    cs = registration.match(kp_p, kp_q)
    assert len(cs) == 8
    result = registration.ransac_register(cs, kp_p, kp_q, 100, 0.05, seed=0)
    assert result.success
    np.testing.assert_allclose(result.transform.as_matrix(), t.as_matrix(), atol=1e-8)


def test_result_record_format():
    """The record holds 12 transform values then three counts."""
    result = registration.RegistrationResult(RigidTransform.identity(), np.arange(5), 8, 17, True)
    fields = result.to_record().split(',')
    assert len(fields) == 15
    assert fields[0] == '1.000000000000'
    assert fields[-3:] == ['5', '8', '17']
    assert result.inlier_ratio == pytest.approx(5 / 8)
    assert result.to_dict()['success'] is True
