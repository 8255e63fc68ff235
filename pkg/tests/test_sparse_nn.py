import numpy as np
import pytest

from app.nn import layers as L
from app.nn import tensor as T
from app.nn.checkpoint import decode_checkpoint, encode_checkpoint
from app.nn.optim import adam_step
from app.nn.sparse import ActiveSet, SparseFeatureMap
from app.nn.tensor import Parameter, Tensor, backward
from app.utils.errors import (CheckpointError, DegenerateFeatureError, EmptyContextError, ShapeError,
                              TapeError)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_sparse(rng, height, width, channels, density=0.4):
    mask = rng.random((height, width)) < density
    mask[0, 0] = True
    dense = rng.normal(size=(height, width, channels))
    return SparseFeatureMap.from_dense(dense, mask), dense, mask


def dense_conv(dense, mask, weight, bias):
    """Zero-padded dense convolution read back at the active cells."""
    k = weight.shape[0]
    r = k // 2
    height, width, _ = dense.shape
    x = dense * mask[..., None]
    out = np.zeros((height, width, weight.shape[3]))
    for i in range(height):
        for j in range(width):
            for a in range(k):
                for b in range(k):
                    ii, jj = i + a - r, j + b - r
                    if 0 <= ii < height and 0 <= jj < width:
                        out[i, j] += x[ii, jj] @ weight[a, b]
    return out[mask] + bias


def test_identity_kernel(rng):
    """A 1x1 identity kernel with zero bias returns its input."""
    x, _, _ = random_sparse(rng, 6, 6, 3)
    out = L.submanifold_conv(x, Parameter(np.eye(3).reshape(1, 1, 3, 3)), Parameter(np.zeros(3)))
    np.testing.assert_array_equal(out.features.data, x.features.data)
    assert out.active is x.active


def test_isolated_cell_sees_center_tap(rng):
    """A lone active cell only meets the center tap."""
    active = ActiveSet(5, 5, [[2, 3]])
    feats = rng.normal(size=(1, 2))
    weight, bias = rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    out = L.submanifold_conv(SparseFeatureMap(active, Tensor(feats)), Parameter(weight), Parameter(bias))
    np.testing.assert_allclose(out.features.data, feats @ weight[1, 1] + bias, atol=1e-12)


@pytest.mark.parametrize('k', [1, 3, 5])
def test_submanifold_matches_dense(rng, k):
    """Sparse convolution equals a dense convolution masked to the active set."""
    x, dense, mask = random_sparse(rng, 8, 8, 3)
    weight, bias = rng.normal(size=(k, k, 3, 2)), rng.normal(size=2)
    out = L.submanifold_conv(x, Parameter(weight), Parameter(bias))
    np.testing.assert_allclose(out.features.data, dense_conv(dense, mask, weight, bias), atol=1e-10)


def test_submanifold_channel_mismatch(rng):
    """A kernel built for other input channels is a shape error."""
    x, _, _ = random_sparse(rng, 4, 4, 3)
    with pytest.raises(ShapeError):
        L.submanifold_conv(x, Parameter(np.zeros((3, 3, 2, 2))))


def test_strided_empty_input():
    """An all-inactive map stays all-inactive after downsampling."""
    x = SparseFeatureMap(ActiveSet(4, 4, np.zeros((0, 2))), Tensor(np.zeros((0, 2))))
    out = L.strided_sparse_conv(x, Parameter(np.ones((2, 2, 2, 3))), Parameter(np.zeros(3)))
    assert out.n_active == 0
    assert (out.height, out.width) == (2, 2)


def test_strided_single_cell():
    """One active fine cell activates exactly its parent."""
    x = SparseFeatureMap(ActiveSet(8, 8, [[3, 5]]), Tensor([[1.0, 2.0]]))
    weight = np.arange(16, dtype=np.float64).reshape(2, 2, 2, 2)
    out = L.strided_sparse_conv(x, Parameter(weight))
    np.testing.assert_array_equal(out.coords, [[1, 2]])
    # (3, 5) sits at tap (1, 1) of its 2x2 footprint
    np.testing.assert_allclose(out.features.data, [[1.0, 2.0] @ weight[1, 1]])


def test_strided_matches_dense(rng):
    """Strided sparse convolution equals a dense 2x2/2 convolution on active parents."""
    x, dense, mask = random_sparse(rng, 8, 6, 3)
    weight, bias = rng.normal(size=(2, 2, 3, 4)), rng.normal(size=4)
    out = L.strided_sparse_conv(x, Parameter(weight), Parameter(bias))
    masked = dense * mask[..., None]
    expected = np.zeros((4, 3, 4))
    for i in range(4):
        for j in range(3):
            for a in range(2):
                for b in range(2):
                    expected[i, j] += masked[2 * i + a, 2 * j + b] @ weight[a, b]
    parents = mask.reshape(4, 2, 3, 2).any(axis=(1, 3))
    np.testing.assert_allclose(out.features.data, expected[parents] + bias, atol=1e-10)


def test_strided_needs_even_dims(rng):
    """Odd grid sizes cannot be halved."""
    x, _, _ = random_sparse(rng, 5, 4, 2)
    with pytest.raises(ShapeError):
        L.strided_sparse_conv(x, Parameter(np.zeros((2, 2, 2, 2))))


def test_upsample_empty_skip():
    """An empty skip map gives an empty output."""
    coarse = SparseFeatureMap(ActiveSet(2, 2, [[0, 0]]), Tensor([[1.0]]))
    skip = SparseFeatureMap(ActiveSet(4, 4, np.zeros((0, 2))), Tensor(np.zeros((0, 2))))
    out = L.upsample_concat(coarse, skip)
    assert out.n_active == 0
    assert out.channels == 3


def test_upsample_inactive_parent_reads_zeros():
    """A skip cell whose parent is inactive is padded with zeros."""
    coarse = SparseFeatureMap(ActiveSet(2, 2, [[1, 1]]), Tensor([[7.0, 8.0]]))
    skip = SparseFeatureMap(ActiveSet(4, 4, [[0, 0], [3, 2]]), Tensor([[1.0], [2.0]]))
    out = L.upsample_concat(coarse, skip)
    np.testing.assert_array_equal(out.features.data, [[1.0, 0.0, 0.0], [2.0, 7.0, 8.0]])


def test_upsample_dimension_mismatch():
    """Coarse maps must be exactly half the skip size."""
    coarse = SparseFeatureMap(ActiveSet(3, 3, [[0, 0]]), Tensor([[1.0]]))
    skip = SparseFeatureMap(ActiveSet(4, 4, [[0, 0]]), Tensor([[1.0]]))
    with pytest.raises(ShapeError):
        L.upsample_concat(coarse, skip)


def test_avg_pool_single_cell():
    """A lone cell averages only itself."""
    x = SparseFeatureMap(ActiveSet(3, 3, [[1, 1]]), Tensor([[2.0, -1.0]]))
    np.testing.assert_array_equal(L.sparse_avg_pool(x, 3).features.data, [[2.0, -1.0]])


def test_avg_pool_uniform(rng):
    """Equal features stay equal."""
    x, _, mask = random_sparse(rng, 6, 6, 2, density=0.7)
    x = x.with_features(np.full((x.n_active, 2), 0.25))
    np.testing.assert_allclose(L.sparse_avg_pool(x, 5).features.data, 0.25, atol=1e-15)


def test_avg_pool_matches_window_mean(rng):
    """Pooling equals the mean over the active cells of each window."""
    x, dense, mask = random_sparse(rng, 7, 9, 3, density=0.5)
    out = L.sparse_avg_pool(x, 3).features.data
    for row, (i, j) in enumerate(x.coords):
        window = [(a, b) for a in range(i - 1, i + 2) for b in range(j - 1, j + 2)
                  if 0 <= a < 7 and 0 <= b < 9 and mask[a, b]]
        expected = np.mean([dense[a, b] for a, b in window], axis=0)
        np.testing.assert_allclose(out[row], expected, rtol=1e-12, atol=1e-12)


def test_l2norm_three_four_five():
    """(3, 4) normalizes to (0.6, 0.8)."""
    x = SparseFeatureMap(ActiveSet(1, 1, [[0, 0]]), Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(L.pointwise(x, 'l2norm').features.data, [[0.6, 0.8]], atol=1e-15)


def test_l2norm_of_zero_vector():
    """A zero vector cannot be normalized."""
    x = SparseFeatureMap(ActiveSet(1, 1, [[0, 0]]), Tensor([[0.0, 0.0]]))
    with pytest.raises(DegenerateFeatureError):
        L.pointwise(x, 'l2norm')


def test_relu_and_sigmoid(rng):
    """ReLU and sigmoid match their scalar definitions."""
    x, _, _ = random_sparse(rng, 5, 5, 4)
    values = x.features.data
    np.testing.assert_array_equal(L.pointwise(x, 'relu').features.data, np.maximum(values, 0.0))
    np.testing.assert_allclose(L.pointwise(x, 'sigmoid').features.data, 1.0 / (1.0 + np.exp(-values)),
                               atol=1e-15)
    with pytest.raises(ValueError):
        L.pointwise(x, 'tanh')


def test_attention_single_token(rng):
    """One key token gets weight one, so the output is its value projection."""
    q_map = SparseFeatureMap(ActiveSet(2, 2, [[0, 1]]), Tensor(rng.normal(size=(1, 3))))
    k_map = SparseFeatureMap(ActiveSet(2, 2, [[1, 0]]), Tensor(rng.normal(size=(1, 3))))
    wq, wk, wv = (Parameter(rng.normal(size=(3, 2))) for _ in range(3))
    out = L.attention(q_map, k_map, k_map, wq, wk, wv)
    np.testing.assert_allclose(out.features.data, k_map.features.data @ wv.data, atol=1e-12)
    np.testing.assert_array_equal(out.coords, q_map.coords)


def test_attention_identical_keys_split_evenly(rng):
    """Two identical keys share the attention weight equally."""
    queries = Tensor(rng.normal(size=(3, 4)))
    keys = Tensor(np.tile(rng.normal(size=(1, 4)), (2, 1)))
    np.testing.assert_allclose(L.attention_weights(queries, keys).data, 0.5, atol=1e-15)


def test_attention_matches_dense(rng):
    """Attention over 5 query and 4 key tokens equals the matrix formula."""
    q_map = SparseFeatureMap(ActiveSet(3, 3, [[0, 0], [0, 2], [1, 1], [2, 0], [2, 2]]),
                             Tensor(rng.normal(size=(5, 3))))
    k_map = SparseFeatureMap(ActiveSet(2, 2, [[0, 0], [0, 1], [1, 0], [1, 1]]), Tensor(rng.normal(size=(4, 3))))
    wq, wk, wv = (rng.normal(size=(3, 2)) for _ in range(3))
    out = L.attention(q_map, k_map, k_map, Parameter(wq), Parameter(wk), Parameter(wv))
    q, k, v = q_map.features.data @ wq, k_map.features.data @ wk, k_map.features.data @ wv
    logits = q @ k.T / np.sqrt(2)
    weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.features.data, weights @ v, atol=1e-10)


def test_attention_needs_keys(rng):
    """An empty key map is an empty context."""
    q_map = SparseFeatureMap(ActiveSet(2, 2, [[0, 0]]), Tensor([[1.0]]))
    empty = SparseFeatureMap(ActiveSet(2, 2, np.zeros((0, 2))), Tensor(np.zeros((0, 1))))
    w = Parameter([[1.0]])
    with pytest.raises(EmptyContextError):
        L.attention(q_map, empty, empty, w, w, w)


def test_mlp3_constant_output(rng):
    """With zero weights the output is the last bias."""
    zeros = [(Parameter(np.zeros((4, 5))), Parameter(np.zeros(5))),
             (Parameter(np.zeros((5, 5))), Parameter(np.zeros(5))),
             (Parameter(np.zeros((5, 2))), Parameter([1.5, -2.0]))]
    out = L.mlp3(Tensor(rng.normal(size=(3, 4))), zeros)
    np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))


def test_mlp3_identity(rng):
    """Identity weights pass non-negative input through."""
    eye = [(Parameter(np.eye(3)), Parameter(np.zeros(3))) for _ in range(3)]
    x = rng.uniform(0.0, 2.0, size=(4, 3))
    np.testing.assert_array_equal(L.mlp3(Tensor(x), eye).data, x)


def test_mlp3_matches_matrix_formula(rng):
    """mlp3 equals the explicit linear/ReLU chain."""
    shapes = [(4, 6), (6, 5), (5, 3)]
    params = [(rng.normal(size=s), rng.normal(size=s[1])) for s in shapes]
    x = rng.normal(size=(7, 4))
    h = np.maximum(x @ params[0][0] + params[0][1], 0.0)
    h = np.maximum(h @ params[1][0] + params[1][1], 0.0)
    expected = h @ params[2][0] + params[2][1]
    out = L.mlp3(Tensor(x), [(Parameter(w), Parameter(b)) for w, b in params])
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    with pytest.raises(ShapeError):
        L.mlp3(Tensor(x), [(Parameter(w), Parameter(b)) for w, b in params[:2]])


def test_backward_sum_gives_ones(rng):
    """The gradient of a sum is all ones."""
    p = Parameter(rng.normal(size=(3, 2)))
    backward(T.total(p))
    np.testing.assert_array_equal(p.grad, np.ones((3, 2)))


def test_backward_squared_norm(rng):
    """d|Wx|^2 / dW = 2 (Wx) x^T."""
    w = Parameter(rng.normal(size=(2, 3)))
    x = rng.normal(size=(3, 1))
    y = T.matmul(w, Tensor(x))
    backward(T.total(T.mul(y, y)))
    np.testing.assert_allclose(w.grad, 2.0 * (w.data @ x) @ x.T, atol=1e-12)


def test_backward_zeroes_unreached_parameters(rng):
    """A listed parameter the loss never touches ends with a zero gradient."""
    used, unused = Parameter(rng.normal(size=3)), Parameter(rng.normal(size=3))
    unused.grad = np.full(3, 7.0)
    backward(T.total(used), [used, unused])
    np.testing.assert_array_equal(used.grad, np.ones(3))
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_without_forward():
    """A bare value has no tape to walk."""
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_adam_zero_gradient_is_a_no_op(rng):
    """A zero gradient leaves parameters unchanged."""
    p = Parameter(rng.normal(size=5))
    before = p.data.copy()
    adam_step([p], 1e-3, 1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_moves_by_lr():
    """With a constant gradient the first step is about -lr * sign(g)."""
    p = Parameter([1.0, -1.0, 0.5])
    p.grad = np.array([2.0, -0.5, 3.0])
    adam_step([p], 1e-2, 1)
    np.testing.assert_allclose(p.data, [1.0 - 1e-2, -1.0 + 1e-2, 0.5 - 1e-2], atol=1e-8)


def test_adam_three_steps_match_scalar_reference():
    """Three updates equal a scalar re-implementation."""
    grads = [0.3, -1.2, 0.7]
    p = Parameter([0.5])
    value, m, v = 0.5, 0.0, 0.0
    for step, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        adam_step([p], 1e-3, step)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        value -= 1e-3 * (m / (1 - 0.9 ** step)) / ((v / (1 - 0.999 ** step)) ** 0.5 + 1e-8)
    assert p.data[0] == pytest.approx(value, abs=1e-12)
    np.testing.assert_array_equal(p.grad, [0.0])


def test_active_set_must_be_sorted():
    """Active cells are unique and in row-major order."""
    with pytest.raises(ShapeError):
        ActiveSet(4, 4, [[1, 1], [0, 0]])
    with pytest.raises(ShapeError):
        ActiveSet(4, 4, [[4, 0]])


def test_checkpoint_round_trip(rng):
    """Blobs read back bit-exact under the same digest."""
    blobs = {'a.weight': rng.normal(size=(2, 3, 4)), 'b': np.array([1.5])}
    digest = bytes(range(32))
    raw = encode_checkpoint(blobs, digest)
    loaded, read_digest = decode_checkpoint(raw, digest)
    assert read_digest == digest
    for name, value in blobs.items():
        np.testing.assert_array_equal(loaded[name], value)


def test_checkpoint_rejects_other_config_and_truncation(rng):
    """A foreign digest or a truncated file is a checkpoint error."""
    raw = encode_checkpoint({'w': rng.normal(size=10)}, bytes(32))
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw, bytes([1]) * 32)
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-9])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b'NOTACKPT' + raw[8:])
