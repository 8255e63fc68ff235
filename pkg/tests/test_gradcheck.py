import numpy as np
import pytest

from app import create_app
from app.nn import layers
from app.nn import tensor as T
from app.nn.tensor import Parameter
from app.services import verification
from app.utils.errors import VerificationError


@pytest.fixture
def app_context():
    app = create_app('testing')
    with app.app_context():
        yield app


def failed(results):
    return [r.line() for r in results if not r.passed]


def test_relative_error_is_normwise():
    """Relative error scales by the larger norm and never divides by zero."""
    assert verification.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert verification.relative_error([0.0], [0.0]) == 0.0
    assert verification.relative_error([2.0], [1.0]) == pytest.approx(0.5)


def test_gradient_check_accepts_correct_gradient():
    """A smooth op with a correct backward passes."""
    p = Parameter(np.random.default_rng(0).normal(size=(3, 4)))
    result = verification.gradient_check('test', 'softplus', lambda: T.total(T.softplus(p)), [p])
    assert result.passed
    assert result.residual < 1e-7


def test_layer_gradients():
    """Every sparse layer passes its finite-difference check."""
    assert failed(verification.layer_gradient_suite()) == []


def test_mutated_convolution_gradient_is_caught(monkeypatch):
    """Negating the kernel gradient makes the layer suite fail."""
    original = layers._conv_grads

    def negated(x, w, rulebook, grad_out):
        gx, gw = original(x, w, rulebook, grad_out)
        return gx, -gw

    monkeypatch.setattr(layers, '_conv_grads', negated)
    results = verification.layer_gradient_suite()
    names = [r.prop for r in results if not r.passed]
    assert 'submanifold_conv gradient' in names
    assert 'strided_sparse_conv gradient' in names
    with pytest.raises(VerificationError, match='submanifold_conv'):
        verification.require_all_passed(results)


def test_head_gradients():
    """Description, detection, height and overlap heads pass their checks."""
    assert failed(verification.head_gradient_suite()) == []


def test_loss_gradients():
    """Every loss term and the weighted total pass their checks."""
    assert failed(verification.loss_gradient_suite()) == []


def test_composed_model_gradient(app_context):
    """The whole model on a small scene pair passes a sampled check."""
    assert failed(verification.composed_gradient_check()) == []


def test_saliency_equivalence():
    """Pooled and box-filter saliency equal the direct window mean."""
    assert failed(verification.saliency_suite(maps=30)) == []


def test_kabsch_and_oracles():
    """Kabsch is exact and sparse layers equal their dense oracles."""
    assert failed(verification.run_all(['kabsch', 'oracles'])) == []


def test_ransac_robustness():
    """RANSAC recovers transforms from 30% inlier sets."""
    assert failed(verification.ransac_suite(trials=20)) == []


def test_suite_lines():
    """Result lines carry status, module, property and residual."""
    result = verification.SuiteResult('registration', 'kabsch', False, 2e-3, '3 instances')
    assert result.line() == 'FAIL registration: kabsch residual=2.000e-03 (3 instances)'
