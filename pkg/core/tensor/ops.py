"""Differentiable operations over `Tensor`.

Every op computes its forward result with numpy and hands a backward rule to
`make_result`; rules return one gradient (or None) per input.
"""
import math

import numpy as np

from core.libs import assertions
from core.tensor.tensor import Tensor, get_dtype, make_result, record_flops

IGNORE_INDEX = -1


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor.wrap(np.asarray(value, dtype=get_dtype()))


def _unbroadcast(grad, shape):
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data / b.data, (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes; b may be 2-D against a batched a."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.data.ndim >= 2 and b.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[-2]
          and (b.data.ndim == 2 or a.data.shape[:-2] == b.data.shape[:-2]))
    assertions.assert_shape(ok, 'matmul: cannot multiply shapes {0} and {1}'.format(a.shape, b.shape))
    out = np.matmul(a.data, b.data)
    m, k = a.data.shape[-2:]
    n = b.data.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record_flops(2 * batch * m * k * n)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.data.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, k, n).sum(axis=0)
        return ga, gb

    return make_result(out, (a, b), backward)


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward)


def reshape(x, shape):
    original = x.data.shape

    def backward(g):
        return (g.reshape(original),)

    return make_result(x.data.reshape(shape), (x,), backward)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    original = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, original).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    original = x.data.shape
    count = x.data.size if axis is None else original[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, original).copy(),)

    return make_result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def _sigmoid(values):
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def sigmoid(x):
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), backward)


def relu(x):
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return make_result(np.where(positive, x.data, 0.0), (x,), backward)


def silu(x):
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return make_result(x.data * s, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return make_result(0.5 * v * (1.0 + t), (x,), backward)


def softmax(x, axis=-1):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward)


def where(cond, x, fill):
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return (_unbroadcast(g * cond, x.data.shape),)

    return make_result(np.where(cond, x.data, np.asarray(fill, dtype=x.data.dtype)), (x,), backward)


def rmsnorm(x, weight, eps=1e-6):
    v = x.data
    inv = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    normed = v * inv

    def backward(g):
        gw = _unbroadcast(g * normed, weight.data.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * weight.data
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        return gx, gw

    return make_result(normed * weight.data, (x, weight), backward)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    assertions.assert_index(bool(np.all((ids >= 0) & (ids < vocab))),
                            'token id out of vocabulary of size {0}'.format(vocab))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result(table.data[ids], (table,), backward)


def cross_entropy(logits, targets, reduction='mean', ignore_index=IGNORE_INDEX):
    """Next-token cross-entropy over rows of `logits`; `ignore_index` rows are padding."""
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.data.shape
    assertions.assert_shape(targets.shape == (n,), 'cross_entropy: {0} targets for {1} rows'.format(targets.shape, n))
    in_vocab = (targets >= 0) & (targets < vocab)
    assertions.assert_index(bool(np.all(in_vocab | (targets == ignore_index))),
                            'target index out of vocabulary of size {0}'.format(vocab))
    valid = targets != ignore_index
    count = int(valid.sum())
    if reduction == 'mean':
        assertions.assert_data(count > 0, 'cross_entropy: no non-padding targets')
    safe = np.where(valid, targets, 0)
    rows = np.arange(n)
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    losses = (lse - shifted[rows, safe]) * valid
    scale = 1.0 / count if reduction == 'mean' else 1.0
    value = np.sum(losses) * scale

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe] -= 1.0
        p *= valid[:, None]
        return (p * (g * scale),)

    return make_result(np.asarray(value, dtype=logits.data.dtype), (logits,), backward)


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(x.data[idx], (x,), backward)


def index_add(base, idx, values):
    """Copy of `base` with `values` added into rows `idx`."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    np.add.at(out, idx, values.data)

    def backward(g):
        return g, g[idx]

    return make_result(out, (base, values), backward)


def column(x, j):
    """Column j of a 2-D tensor, kept as [rows, 1]."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, j:j + 1] = g
        return (gx,)

    return make_result(x.data[:, j:j + 1], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def ste_fraction(x):
    """Mean of `x` whose backward hands every element the full upstream gradient, as for a count."""
    original = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, original).copy(),)

    return make_result(np.mean(x.data), (x,), backward)


def ste_gate(scores, tau):
    """Binary keep mask (score >= tau) whose backward passes gradients straight to the scores."""
    mask = (scores.data >= tau).astype(scores.data.dtype)

    def backward(g):
        return (g,)

    return make_result(mask, (scores,), backward)


def rope(x, positions, base=10000.0):
    """Rotary position embedding over the last axis (half-split layout)."""
    half = x.data.shape[-1] // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / x.data.shape[-1])
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(x.data.dtype)
    sin = np.sin(angles).astype(x.data.dtype)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return make_result(out, (x,), backward)
