"""Parameter containers and transformer building blocks."""

import math

import numpy as np

from ..exceptions import ShapeError
from . import functional as F
from .tensor import Tensor


def parameter(data):
    return Tensor(data, requires_grad=True)


def xavier_normal(rng, fan_in, fan_out, gain=1.0):
    std = gain * math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Module:
    """Attribute-registered parameter tree.

    Parameters are the ``requires_grad`` tensors found in instance attributes,
    submodules and lists of submodules, in attribute insertion order.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = None

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, gain=1.0):
        self.weight = parameter(xavier_normal(rng, d_in, d_out, gain))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return F.layer_norm(x, self.weight, self.bias, eps=self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, value_gain=1.0):
        if dim % heads:
            raise ShapeError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng, gain=value_gain)
        self.out_proj = Linear(dim, dim, rng, gain=value_gain)

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x, rng=None, dropout=0.0):
        b, t, d = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        scores = F.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        attn = F.dropout(F.softmax(scores, axis=-1), dropout, rng)
        ctx = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, gain=1.0):
        self.fc1 = Linear(dim, hidden, rng, gain=gain)
        self.fc2 = Linear(hidden, dim, rng, gain=gain)

    def __call__(self, x, rng=None, dropout=0.0):
        return self.fc2(F.dropout(F.gelu(self.fc1(x)), dropout, rng))


class TransformerBlock(Module):
    """Self-attention + MLP block, pre-norm or DeepNorm-scaled post-norm.

    Post-norm computes ``LN(alpha * x + f(x))`` for each sublayer.
    """

    def __init__(self, dim, heads, rng, mlp_ratio=4.0, norm="pre", alpha=1.0, beta=1.0):
        if norm not in ("pre", "post"):
            raise ValueError(f"norm must be 'pre' or 'post', got {norm!r}")
        self.norm = norm
        self.alpha = float(alpha)
        self.attn = MultiHeadAttention(dim, heads, rng, value_gain=beta)
        self.ln1 = LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio), rng, gain=beta)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x, rng=None, dropout=0.0):
        if self.norm == "pre":
            x = x + F.dropout(self.attn(self.ln1(x), rng, dropout), dropout, rng)
            return x + F.dropout(self.mlp(self.ln2(x), rng, dropout), dropout, rng)
        x = self.ln1(x * self.alpha + F.dropout(self.attn(x, rng, dropout), dropout, rng))
        return self.ln2(x * self.alpha + F.dropout(self.mlp(x, rng, dropout), dropout, rng))


def deepnorm_constants(depth):
    """Encoder-only DeepNorm residual scale and init gain for ``depth`` layers."""
    return (2.0 * depth) ** 0.25, (8.0 * depth) ** -0.25


class TransformerStack(Module):
    def __init__(self, dim, depth, heads, rng, mlp_ratio=4.0, norm="pre"):
        if norm == "post" and depth > 0:
            alpha, beta = deepnorm_constants(depth)
        else:
            alpha, beta = 1.0, 1.0
        self.blocks = [TransformerBlock(dim, heads, rng, mlp_ratio, norm, alpha, beta)
                       for _ in range(depth)]
        self.final_ln = LayerNorm(dim) if norm == "pre" and depth > 0 else None

    def __call__(self, x, rng=None, dropout=0.0, layer_drop=0.0, return_all=False):
        hidden = []
        for block in self.blocks:
            if layer_drop > 0.0 and rng is not None and rng.random() < layer_drop:
                hidden.append(x)
                continue
            x = block(x, rng, dropout)
            hidden.append(x)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return (x, hidden) if return_all else x
