"""Central finite-difference validation of analytic gradients."""

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(fn, inputs, h=1e-5):
    """Central differences of scalar ``fn()`` wrt each tensor in ``inputs``."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(fn, inputs, h=1e-5, floor=1e-6):
    """Return the max relative error between backprop and finite differences.

    ``fn`` rebuilds the graph from the current values of ``inputs`` on every
    call and returns a scalar :class:`Tensor`.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss, params=inputs)
    analytic = [t.grad.copy() for t in inputs]
    numeric = numeric_grad(fn, inputs, h)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))


def random_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
