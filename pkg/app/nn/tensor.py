"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a Tensor that remembers its parents and a backward function
mapping the output gradient to one gradient per parent. `backward` walks that
tape in reverse topological order. Parameters are leaves that accumulate
gradients and carry Adam moment buffers.
"""
import numpy as np

from app.utils.errors import ShapeError, TapeError


class Tensor:
    """A float64 array node on the autodiff tape."""
    __slots__ = ('data', 'grad', 'parents', 'backward_fn', 'name')

    def __init__(self, data, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = f' {self.name}' if self.name else ''
        return f'<Tensor{label} shape={self.shape}>'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf: value, gradient accumulator and Adam moments of one shape."""
    __slots__ = ('adam_m', 'adam_v')

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), name=name)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f'<Parameter {self.name} shape={self.shape}>'


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=()):
    """
    Accumulate d(loss)/d(leaf) into every leaf reachable from `loss`.

    Entries of `params` that `loss` does not reach get a zero gradient.
    """
    if not isinstance(loss, Tensor) or (loss.is_leaf and not isinstance(loss, Parameter)):
        raise TapeError("backward() needs a value produced by a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    reached = {id(node) for node in order}
    for param in params:
        if id(param) not in reached:
            param.zero_grad()
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# Elementwise and reduction ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return Tensor(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    original = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def total(a, axis=None, keepdims=False):
    """Sum over `axis` (all axes when None)."""
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a, axis=None):
    count = a.data.size if axis is None else a.shape[axis]
    return mul(total(a, axis=axis), 1.0 / count)


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    return Tensor(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """ln(1 + e^x), evaluated without overflow."""
    slope = np.exp(-np.logaddexp(0.0, -a.data))
    return Tensor(np.logaddexp(0.0, a.data), (a,), lambda g: (g * slope,))


def clip(a, low, high):
    inside = (a.data >= low) & (a.data <= high)
    return Tensor(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def _select_extreme(a, axis, pick):
    idx = pick(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor(out, (a,), grad_fn)


def amax(a, axis):
    """Maximum along `axis`; the gradient goes to the first maximal entry."""
    return _select_extreme(a, axis, np.argmax)


def amin(a, axis):
    """Minimum along `axis`; the gradient goes to the first minimal entry."""
    return _select_extreme(a, axis, np.argmin)


def logsumexp(a, axis):
    shift = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - shift)
    norm = shifted.sum(axis=axis, keepdims=True)
    out = (shift + np.log(norm)).squeeze(axis)
    weights = shifted / norm
    return Tensor(out, (a,), lambda g: (np.expand_dims(g, axis) * weights,))


def softmax(a, axis=-1):
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (a,), grad_fn)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(a, index):
    """
    Gather rows of a 2-D (or entries of a 1-D) tensor.

    Negative indices produce zero rows and receive no gradient.
    """
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = a.data[safe]
    mask = valid.reshape(valid.shape + (1,) * (out.ndim - valid.ndim))
    out = np.where(mask, out, 0.0)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, safe[valid], g[valid])
        return (grad,)

    return Tensor(out, (a,), grad_fn)


def spmm(matrix, a):
    """Product of a constant scipy sparse matrix with a dense tensor."""
    return Tensor(np.asarray(matrix @ a.data), (a,), lambda g: (np.asarray(matrix.T @ g),))


def normalize_rows(a, eps=None):
    """
    Divide each row by its Euclidean norm.

    With `eps` the norm is sqrt(|x|^2 + eps) and never fails; callers that need
    the exact unit-norm contract check for degenerate rows themselves.
    """
    sq = (a.data ** 2).sum(axis=1, keepdims=True)
    norm = np.sqrt(sq if eps is None else sq + eps)
    out = a.data / norm

    def grad_fn(g):
        dot = (g * a.data).sum(axis=1, keepdims=True)
        return (g / norm - a.data * dot / norm ** 3,)

    return Tensor(out, (a,), grad_fn)
