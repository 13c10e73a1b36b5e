"""Finite-difference gradient suite over every op and both training objectives."""

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore.gradcheck import numeric_grad, random_tensor, relative_error
from .sdtok import SelfDistilledTokenizer
from .ssl_model import (AudioSSLModel, BackboneConfig, encode_unmasked, mam_loss,
                        predict_labels, sample_mask)

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradResult:
    name: str
    error: float
    passed: bool


def _op_cases(rng):
    a = random_tensor(rng, 2, 3, 4)
    b = random_tensor(rng, 2, 3, 4)
    m = random_tensor(rng, 4, 5)
    w = random_tensor(rng, 4)
    logits = random_tensor(rng, 6, 5)
    soft = nc.softmax(nc.Tensor(rng.normal(size=(6, 5)))).data
    binary = (rng.random((6, 5)) > 0.5).astype(float)
    targets = rng.integers(0, 5, 6)
    idx = np.array([[2, 0], [1, 2]])
    frozen = nc.Tensor(b.data * a.data)

    def dropout():
        return nc.dropout(a, 0.3, np.random.default_rng(3))

    return {
        "add": ([a, b], lambda: a + b), "sub": ([a, b], lambda: a - b),
        "mul": ([a, b], lambda: a * b), "div": ([a, b], lambda: a / (b * b + 1.0)),
        "neg": ([a], lambda: -a), "pow": ([a], lambda: (a * a + 0.5) ** 1.5),
        "matmul": ([a, m], lambda: nc.matmul(a, m)),
        "exp": ([a], lambda: (a * 0.3).exp()), "log": ([a], lambda: (a * a + 1.0).log()),
        "sqrt": ([a], lambda: (a * a + 1.0).sqrt()), "tanh": ([a], lambda: a.tanh()),
        "sum": ([a], lambda: a.sum(axis=1)), "mean": ([a], lambda: a.mean(axis=-1)),
        "reshape": ([a], lambda: a.reshape(6, 4)),
        "transpose": ([a], lambda: a.transpose(2, 0, 1)),
        "getitem": ([a], lambda: a[:, 1:, ::2]),
        "l2_normalize": ([a], lambda: nc.l2_normalize(a)),
        "cosine_similarity": ([a, b], lambda: nc.cosine_similarity(a, b)),
        "softmax": ([a], lambda: nc.softmax(a)), "log_softmax": ([a], lambda: nc.log_softmax(a)),
        "sigmoid": ([a], lambda: nc.sigmoid(a)),
        "softmax_cross_entropy": ([logits], lambda: nc.softmax_cross_entropy(logits, targets)),
        "soft_cross_entropy": ([logits], lambda: nc.soft_cross_entropy(logits, soft)),
        "bce_with_logits": ([logits],
                            lambda: nc.binary_cross_entropy_with_logits(logits, binary)),
        "layer_norm": ([a, w], lambda: nc.layer_norm(a, w, w * 0.5)),
        "gelu": ([a], lambda: nc.gelu(a)), "mean_pool": ([a], lambda: nc.mean_pool(a)),
        "gather_rows": ([a], lambda: nc.gather_rows(a, idx)),
        "scatter_rows": ([a], lambda: nc.scatter_rows(nc.gather_rows(a, idx), idx, 3)),
        "concat": ([a, b], lambda: nc.concat([a, b], axis=1)),
        "dropout": ([a], dropout),
        "stop_gradient": ([a, b], lambda: (a - nc.stop_gradient(b * a)) ** 2,
                          lambda: (a - frozen) ** 2),
    }


def _check(fn, inputs, h=STEP, reference=None):
    for t in inputs:
        t.grad = None
    nc.backward(fn(), params=inputs)
    analytic = [t.grad.copy() for t in inputs]
    numeric = numeric_grad(reference or fn, inputs, h)
    return max(relative_error(x, y) for x, y in zip(analytic, numeric))


def op_gradients(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, (inputs, build, *ref) in _op_cases(rng).items():
        weights = {}

        def weighted(build, name=name):
            def fn():
                y = nc.as_tensor(build())
                if name not in weights:
                    weights[name] = np.random.default_rng(11).normal(size=y.shape)
                return (y * weights[name]).sum()
            return fn

        # Stop-gradient operands are compared against a copy frozen at the base point.
        err = _check(weighted(build), inputs,
                     reference=weighted(ref[0]) if ref else None)
        out.append(GradResult(f"op:{name}", err, err < TOLERANCE))
    return out


def tokenizer_composite(seed=0):
    """Distillation objective through encoder, quantizer, straight-through and estimator.

    The analytic gradient comes from the real training objective. The numeric
    one differentiates the same composite with every stop-gradient operand and
    the straight-through offset frozen at their base-point values, which is the
    function whose gradient those operators define.
    """
    rng = np.random.default_rng(seed)
    tok = SelfDistilledTokenizer(n_codes=8, code_dim=4, hidden=8, encoder_depth=1,
                                 estimator_depth=1, heads=2, mlp_ratio=2.0, max_patches=8,
                                 patch_dim=12, dropout=0.0, codebook_mode="grad", seed=seed)
    tok.initialize(target_dim=5)
    xb = rng.normal(size=(2, 4, 12))
    tb = rng.normal(size=(2, 4, 5))
    params = tok.trainable_parameters()
    for p in params:
        p.grad = None
    objective, _, labels, enc0 = tok.forward_loss(xb, tb, train=False)
    nc.backward(objective, params=params)
    analytic = [p.grad.copy() for p in params]

    codebook = tok.codebook_
    ne0 = nc.l2_normalize(nc.Tensor(enc0)).data
    n = labels.size

    # Frozen operands must not move with the perturbed parameters.
    frozen_q = codebook.data[labels].copy()
    frozen_nv = nc.l2_normalize(nc.Tensor(frozen_q)).data

    def surrogate_frozen():
        enc = tok.encoder_(nc.Tensor(xb))
        out = tok.estimator_(enc + nc.Tensor(frozen_q - enc0))
        nv = nc.l2_normalize(codebook[labels])
        ne = nc.l2_normalize(enc)
        cos = nc.cosine_similarity(out, nc.Tensor(tb)).sum()
        total = ((nc.Tensor(ne0) - nv) ** 2).sum() + ((ne - nc.Tensor(frozen_nv)) ** 2).sum() - cos
        return total * (1.0 / n)

    numeric = numeric_grad(surrogate_frozen, params, STEP)
    err = max(relative_error(a, b) for a, b in zip(analytic, numeric))
    return GradResult("composite:distillation", err, err < TOLERANCE)


def pretrain_composite(seed=0):
    """Masked-label cross-entropy of a depth-1, 4-patch, K=8 model wrt every weight."""
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(depth=1, hidden=8, heads=2, patch_dim=16, max_patches=4,
                         mlp_ratio=2.0, predictor_depth=1, n_codes=8)
    model = AudioSSLModel(cfg, rng)
    x = rng.normal(size=(1, 4, 16))
    labels = rng.integers(0, 8, size=(1, 4))
    mask = sample_mask(4, 0.75, rng)

    def loss():
        return mam_loss(predict_labels(model, encode_unmasked(model, x, [mask]), [mask]),
                        labels, [mask])

    err = _check(loss, model.parameters())
    return GradResult("composite:masked_prediction", err, err < TOLERANCE)


def gradient_suite(seed=0):
    return op_gradients(seed) + [tokenizer_composite(seed), pretrain_composite(seed)]
