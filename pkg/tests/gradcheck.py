"""Central finite-difference gradient checking, shared by the test files.

Everything runs in 64-bit. The scalar loss is a fixed random projection
of the forward output, so input and parameter gradients are both checked
against the same differentiable quantity.
"""

import numpy as np

from seizurecnn.layers import TRAIN

FD_STEP = 1e-5
FD_TOL = 1e-4
KINK_EPS = 1e-6


def finite_difference(loss_fn, array, h=FD_STEP):
    """Two-sided difference of loss_fn with respect to every element."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, skip=None):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    err = np.abs(analytic - numeric) / denom
    if skip is not None:
        err = np.where(skip, 0.0, err)
    return float(err.max()) if err.size else 0.0


def check_layer(layer, x, projection_rng, rng_factory=None, skip_input=None):
    """Compare a layer's backward pass against finite differences.

    ``rng_factory`` must recreate an identical stream per call so that
    stochastic layers see the same draws in every forward evaluation.
    Returns the worst relative error over the input and all parameters.
    """
    x = np.asarray(x, dtype=np.float64)

    def run_forward():
        rng = rng_factory() if rng_factory is not None else None
        return layer.forward(x, TRAIN, rng)

    out = run_forward()
    proj = projection_rng.normal(size=out.shape)

    dx = layer.backward(proj.astype(out.dtype))
    param_grads = {k: v.copy() for k, v in layer.grads().items()}

    def loss():
        return float((run_forward() * proj).sum())

    worst = max_relative_error(dx, finite_difference(loss, x), skip_input)
    params = layer.params()
    for name, grad in param_grads.items():
        numeric = finite_difference(loss, params[name])
        worst = max(worst, max_relative_error(grad, numeric))
    return worst


def check_network(network, x, projection_rng, rng_factory=None):
    """Same as check_layer for a whole layer stack."""
    x = np.asarray(x, dtype=np.float64)

    def run_forward():
        rng = rng_factory() if rng_factory is not None else None
        return network.forward(x, TRAIN, rng)

    out = run_forward()
    proj = projection_rng.normal(size=out.shape)

    dx = network.backward(proj)
    param_grads = {k: v.copy() for k, v in network.grads().items()}

    def loss():
        return float((run_forward() * proj).sum())

    worst = max_relative_error(dx, finite_difference(loss, x))
    params = network.params()
    for name, grad in param_grads.items():
        numeric = finite_difference(loss, params[name])
        worst = max(worst, max_relative_error(grad, numeric))
    return worst


def relu_skip_mask(x):
    """Coordinates too close to the ReLU kink for finite differences."""
    return np.abs(np.asarray(x)) < KINK_EPS


def pool_skip_mask(x, window):
    """Coordinates involved in a near-tie inside their pooling window."""
    x = np.asarray(x)
    window = tuple(window)
    rank = len(window)
    outs = tuple(s // w for s, w in zip(x.shape[2:], window))
    inter = []
    for o, w in zip(outs, window):
        inter += [o, w]
    perm = (0, 1) + tuple(2 + 2 * i for i in range(rank)) + tuple(3 + 2 * i for i in range(rank))
    tiles = x.reshape(x.shape[:2] + tuple(inter)).transpose(perm)
    tiles = tiles.reshape(x.shape[:2] + outs + (-1,))
    top = np.max(tiles, axis=-1, keepdims=True)
    near = (top - tiles) < KINK_EPS
    # window is tied if more than one element sits at (or near) the top
    tied = near.sum(axis=-1, keepdims=True) > 1
    mask = np.broadcast_to(tied, tiles.shape).reshape(x.shape[:2] + outs + window)
    return mask.transpose(np.argsort(perm)).reshape(x.shape)
