"""Central finite-difference gradient verification."""

import numpy as np

from .. import io as rtio
from .training import _LOSSES


def check_gradients(net, x, y, loss="mse", eps=1e-5, n_samples=100, seed=0,
                    check_input=True):
    """Max relative error between backprop and central differences.

    Finite differences re-run the forward pass in training mode so layers
    with batch-dependent statistics (batch norm) differentiate the same
    function the backward pass saw.  Samples up to ``n_samples`` parameter
    entries plus (optionally) ``n_samples`` input entries.  Use a float64
    network; float32 cannot resolve the differences.

    Returns
    -------
    float
        max over sampled entries of |analytic - numeric| / max(|analytic|,
        |numeric|, 1e-8); both near zero counts as exact.
    """
    loss_fn = _LOSSES[loss]
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype)
    saved_state = [buf.copy() for layer in net.layers for buf in layer.state]

    def loss_at():
        return loss_fn(net.forward(x, training=True), y)[0]

    pred = net.forward(x, training=True)
    _, grad = loss_fn(pred, y)
    d_input = net.backward(grad)
    analytic = [g.copy() for g in net.gradients()]
    params = net.parameters()
    rng = rtio.rng_from(seed, "gradcheck")

    def rel_err(a, numeric):
        if abs(a) < 1e-12 and abs(numeric) < 1e-12:
            return 0.0
        return abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)

    def central(buffer, j):
        flat = buffer.reshape(-1)
        original = flat[j]
        flat[j] = original + eps
        lp = loss_at()
        flat[j] = original - eps
        lm = loss_at()
        flat[j] = original
        return (lp - lm) / (2.0 * eps)

    worst = 0.0
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(entries) > n_samples:
        chosen = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[int(c)] for c in chosen]
    for i, j in entries:
        numeric = central(params[i], j)
        worst = max(worst, rel_err(analytic[i].reshape(-1)[j], numeric))

    if check_input:
        idx = np.arange(x.size)
        if x.size > n_samples:
            idx = rng.choice(x.size, size=n_samples, replace=False)
        for j in idx:
            numeric = central(x, int(j))
            worst = max(worst, rel_err(d_input.reshape(-1)[int(j)], numeric))

    for buf, saved in zip(
        (b for layer in net.layers for b in layer.state), saved_state
    ):
        buf[...] = saved
    return worst
