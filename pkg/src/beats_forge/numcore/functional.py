"""Fused differentiable operations built on :class:`Tensor`."""

import numpy as np
from scipy.special import erf

from ..exceptions import ShapeError
from .tensor import Tensor, as_tensor, matmul

EPS_NORM = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def stop_gradient(x):
    """Forward identity that blocks every gradient path through ``x``."""
    return Tensor(as_tensor(x).data)


def l2_normalize(x, axis=-1, eps=EPS_NORM):
    """Scale each slice along ``axis`` to unit norm.

    Slices with norm below ``eps`` pass through unchanged (identity gradient).
    """
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    ok = norm >= eps
    safe = np.where(ok, norm, 1.0)
    out = x.data / safe

    def bw(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(ok, (g - out * proj) / safe, g),)

    return Tensor._make(out, (x,), bw)


def cosine_similarity(a, b, axis=-1, eps=EPS_NORM):
    """Cosine between slices of ``a`` and ``b``; 0 when either is near zero."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt(np.sum(a.data ** 2, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b.data ** 2, axis=axis, keepdims=True))
    ok = (na >= eps) & (nb >= eps)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = np.sum(a.data * b.data, axis=axis, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = np.where(ok, g * (b.data / (na_s * nb_s) - cos * a.data / na_s ** 2), 0.0)
        gb = np.where(ok, g * (a.data / (na_s * nb_s) - cos * b.data / nb_s ** 2), 0.0)
        return ga, gb

    return Tensor._make(np.squeeze(cos, axis=axis), (a, b), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    n, k = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target out of range [0, {k})")
    targets = targets.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, targets])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return Tensor._make(np.asarray(loss), (logits,), bw)


def soft_cross_entropy(logits, target_probs):
    """Row-mean cross-entropy against soft label vectors."""
    logits = as_tensor(logits)
    y = np.asarray(target_probs, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"label shape {y.shape} does not match logits {logits.shape}")
    return -(log_softmax(logits, axis=-1) * y).sum(axis=-1).mean()


def binary_cross_entropy_with_logits(logits, targets):
    """Mean elementwise binary cross-entropy, computed stably from logits."""
    x = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != x.shape:
        raise ShapeError(f"label shape {y.shape} does not match logits {x.shape}")
    d = x.data
    loss = np.mean(np.maximum(d, 0.0) - d * y + np.log1p(np.exp(-np.abs(d))))
    n = d.size

    def bw(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * d))
        return ((s - y) * (g / n),)

    return Tensor._make(np.asarray(loss), (x,), bw)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalize over the last axis, then apply optional affine parameters."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * np.mean(g * xhat, axis=-1, keepdims=True)),)

    out = Tensor._make(xhat, (x,), bw)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out, (x,), bw)


def mean_pool(x, axis=-2):
    """Average over the sequence axis."""
    return as_tensor(x).mean(axis=axis)


def gather_rows(x, index):
    """Select rows per batch item: ``x`` (B, T, D), ``index`` (B, n) -> (B, n, D)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} with index {index.shape}")
    idx = index[:, :, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None]
        np.add.at(full, (b, index), g)
        return (full,)

    return Tensor._make(out, (x,), bw)


def scatter_rows(x, index, length):
    """Inverse of :func:`gather_rows`: place rows at ``index``, zeros elsewhere."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.shape != x.shape[:2]:
        raise ShapeError(f"scatter_rows: x {x.shape} with index {index.shape}")
    out = np.zeros((x.shape[0], length, x.shape[2]))
    b = np.arange(x.shape[0])[:, None]
    out[b, index] = x.data

    def bw(g):
        return (g[b, index],)

    return Tensor._make(out, (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), bw)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep
