"""
Differentiable layers on sparse feature maps.

The functional ops (`submanifold_conv`, `strided_sparse_conv`, ...) take
explicit parameters; the small module classes below own their Parameters and
name them for checkpoints.
"""
import numpy as np

from app.nn import tensor as T
from app.nn.sparse import SparseFeatureMap
from app.nn.tensor import Parameter, Tensor
from app.utils.errors import DegenerateFeatureError, EmptyContextError, ShapeError

NORM_FLOOR = 1e-12


def _conv_forward(x, w, rulebook, n_out):
    out = np.zeros((n_out, w.shape[2]))
    for tap, (src, dst) in enumerate(rulebook):
        if src.size:
            out[dst] += x[src] @ w[tap]
    return out


def _conv_grads(x, w, rulebook, grad_out):
    """Gradients of a rulebook convolution w.r.t. its input rows and its taps."""
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for tap, (src, dst) in enumerate(rulebook):
        if src.size:
            g = grad_out[dst]
            gx[src] += g @ w[tap].T
            gw[tap] = x[src].T @ g
    return gx, gw


def _rulebook_conv(features, weight, bias, rulebook, n_out):
    cin, cout = weight.shape[-2:]
    if features.shape[1] != cin:
        raise ShapeError(f"convolution expects {cin} input channels, got {features.shape[1]}")
    w = weight.data.reshape(-1, cin, cout)
    if w.shape[0] != len(rulebook):
        raise ShapeError(f"kernel has {w.shape[0]} taps but the rulebook has {len(rulebook)}")
    out = _conv_forward(features.data, w, rulebook, n_out)
    parents = [features, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        gx, gw = _conv_grads(features.data, w, rulebook, g)
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor(out, parents, grad_fn)


def submanifold_conv(x, weight, bias=None):
    """
    k x k convolution evaluated only at active cells; inactive neighbours read as zero.

    Args:
        x: SparseFeatureMap
        weight: Parameter of shape (k, k, Cin, Cout), tap (a, b) reads offset (a - k//2, b - k//2)
        bias: Parameter of shape (Cout,) or None
    """
    k = weight.shape[0]
    if weight.data.ndim != 4 or weight.shape[1] != k:
        raise ShapeError(f"kernel must have shape (k, k, Cin, Cout), got {weight.shape}")
    book = x.active.submanifold_rulebook(k)
    return x.with_features(_rulebook_conv(x.features, weight, bias, book, x.n_active))


def strided_sparse_conv(x, weight, bias=None, stride=2):
    """2 x 2 convolution with stride 2; a coarse cell is active iff any covered fine cell is."""
    if stride != 2 or weight.shape[:2] != (2, 2):
        raise ShapeError("strided convolution supports a 2x2 kernel with stride 2 only")
    coarse, book = x.active.downsample()
    return SparseFeatureMap(coarse, _rulebook_conv(x.features, weight, bias, book, len(coarse)))


def upsample_concat(coarse, skip):
    """Per skip cell: skip feature followed by its parent's coarse feature (zeros if inactive)."""
    parents = skip.active.parent_index(coarse.active)
    lifted = T.take_rows(coarse.features, parents)
    return skip.with_features(T.concat([skip.features, lifted], axis=1))


def sparse_avg_pool(x, window):
    """Mean over the active cells of the s x s window around each cell (itself included)."""
    return x.with_features(T.spmm(x.active.pool_matrix(window), x.features))


def l2_normalize(features):
    norms = np.linalg.norm(features.data, axis=1)
    if norms.size and norms.min() <= NORM_FLOOR:
        raise DegenerateFeatureError(f"cannot L2-normalize a vector of norm {norms.min():.3g}")
    return T.normalize_rows(features)


def pointwise(x, kind):
    if kind == 'relu':
        return x.with_features(T.relu(x.features))
    if kind == 'sigmoid':
        return x.with_features(T.sigmoid(x.features))
    if kind == 'l2norm':
        return x.with_features(l2_normalize(x.features))
    raise ValueError(f"unknown pointwise kind '{kind}'")


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear layer expects width {weight.shape[0]}, got {x.shape[-1]}")
    out = T.matmul(x, weight)
    return out if bias is None else T.add(out, bias)


def mlp3(x, params):
    """linear -> ReLU -> linear -> ReLU -> linear over a (N, C) batch."""
    if len(params) != 3:
        raise ShapeError(f"mlp3 needs three (weight, bias) pairs, got {len(params)}")
    (w1, b1), (w2, b2), (w3, b3) = params
    hidden = T.relu(linear(x, w1, b1))
    hidden = T.relu(linear(hidden, w2, b2))
    return linear(hidden, w3, b3)


def attention_weights(queries, keys):
    """Row-stochastic (Nq, Nk) softmax of scaled dot products."""
    scale = 1.0 / np.sqrt(queries.shape[1])
    return T.softmax(T.mul(T.matmul(queries, T.transpose(keys)), scale), axis=1)


def attention(query_map, key_map, value_map, wq, wk, wv):
    """
    Single-head scaled dot-product attention treating active cells as tokens.

    The output map has the query map's active set.
    """
    if not key_map.active.same_as(value_map.active):
        raise ShapeError("key and value maps must share one active set")
    if key_map.n_active == 0:
        raise EmptyContextError("attention needs at least one key token")
    q = linear(query_map.features, wq)
    k = linear(key_map.features, wk)
    v = linear(value_map.features, wv)
    return query_map.with_features(T.matmul(attention_weights(q, k), v))


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Owner of named Parameters; sub-layers are listed in `children`."""

    def __init__(self):
        self.params = {}
        self.children = {}

    def named_parameters(self, prefix=''):
        for name, param in self.params.items():
            yield prefix + name, param
        for name, child in self.children.items():
            yield from child.named_parameters(f'{prefix}{name}.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class SubmanifoldConv(Layer):
    def __init__(self, rng, c_in, c_out, kernel=3):
        super().__init__()
        fan = kernel * kernel
        self.params['weight'] = Parameter(glorot(rng, (kernel, kernel, c_in, c_out), fan * c_in, fan * c_out))
        self.params['bias'] = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return submanifold_conv(x, self.params['weight'], self.params['bias'])


class StridedConv(Layer):
    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.params['weight'] = Parameter(glorot(rng, (2, 2, c_in, c_out), 4 * c_in, 4 * c_out))
        self.params['bias'] = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return strided_sparse_conv(x, self.params['weight'], self.params['bias'])


class ResidualBlock(Layer):
    """relu(x + conv(relu(conv(x)))) with two 3 x 3 submanifold convs."""

    def __init__(self, rng, channels):
        super().__init__()
        self.children['conv1'] = SubmanifoldConv(rng, channels, channels)
        self.children['conv2'] = SubmanifoldConv(rng, channels, channels)

    def __call__(self, x):
        h = pointwise(self.children['conv1'](x), 'relu')
        h = self.children['conv2'](h)
        return x.with_features(T.relu(T.add(x.features, h.features)))


class MLP3(Layer):
    def __init__(self, rng, widths):
        super().__init__()
        for n, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self.params[f'w{n}'] = Parameter(glorot(rng, (a, b), a, b))
            self.params[f'b{n}'] = Parameter(np.zeros(b))

    def __call__(self, x):
        p = self.params
        return mlp3(x, [(p['w1'], p['b1']), (p['w2'], p['b2']), (p['w3'], p['b3'])])


class Attention(Layer):
    def __init__(self, rng, channels, dim=None):
        super().__init__()
        dim = dim or channels
        for name in ('wq', 'wk', 'wv'):
            self.params[name] = Parameter(glorot(rng, (channels, dim), channels, dim))

    def __call__(self, query_map, key_map, value_map):
        p = self.params
        return attention(query_map, key_map, value_map, p['wq'], p['wk'], p['wv'])
