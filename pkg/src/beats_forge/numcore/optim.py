"""AdamW with decoupled weight decay, plus learning-rate schedules."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ShapeError


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """Apply one AdamW update in place and return ``params``.

    ``params`` and ``grads`` are parallel lists of arrays. Weight decay is
    ``p -= lr * wd * p``, applied before the adaptive step.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class AdamW:
    """Optimizer over :class:`Tensor` parameters.

    Vectors (biases, norm gains) are excluded from weight decay. ``lr_scales``
    gives optional per-parameter multipliers (layer-wise decay).
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01,
                 lr_scales=None):
        self.params = list(params)
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
        self.base_lr = lr
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, scale, m, v in zip(self.params, self.lr_scales, st.m, st.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            lr = st.lr * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay and p.ndim > 1:
                p.data -= lr * st.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays, step):
        for i in range(len(self.params)):
            self.state.m[i] = np.array(arrays[f"m.{i}"], dtype=np.float64)
            self.state.v[i] = np.array(arrays[f"v.{i}"], dtype=np.float64)
        self.state.step = int(step)


def linear_warmup_decay(step, total, warmup, peak):
    """Linear warmup to ``peak`` then linear decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    return peak * max(0.0, 1.0 - (step - warmup) / span)


def cosine_warmup(step, total, warmup, peak):
    """Linear warmup then half-cosine decay to 0."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(1.0, (step - warmup) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
