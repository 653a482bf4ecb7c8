"""Loss functions and the deterministic minibatch training loop."""

from dataclasses import dataclass, field

import numpy as np

from .. import io as rtio
from ..errors import ConfigurationError, TrainingFailure
from .optim import Adam


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred - target
    loss = float(np.mean(diff**2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def l1_loss(pred, target):
    """Mean absolute error and its (sub)gradient."""
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return loss, grad


def bce_loss(prob, target, eps=1e-7):
    """Binary cross-entropy on probabilities in (0, 1)."""
    p = np.clip(prob, eps, 1.0 - eps)
    loss = float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))
    grad = (p - target) / (p * (1.0 - p)) / p.size
    return loss, grad


_LOSSES = {"mse": mse_loss, "l1": l1_loss, "bce": bce_loss}


@dataclass
class LossHistory:
    """Per-epoch mean losses, ready for plotting as CSV columns."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def as_rows(self):
        rows = []
        for i, t in enumerate(self.train):
            v = self.val[i] if i < len(self.val) else ""
            rows.append([i, t, v])
        return rows


def iter_batches(n: int, batch_size: int, rng=None):
    """Index batches in a fixed order; shuffled when ``rng`` is given."""
    idx = np.arange(n)
    if rng is not None:
        idx = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def fit(net, x, y, epochs, optimizer=None, batch_size=16, loss="mse", seed=0,
        shuffle=True, x_val=None, y_val=None):
    """Train ``net`` in place; returns (net, LossHistory).

    Deterministic given ``seed``: epoch shuffles come from a derived
    generator and samples are visited in permutation order.

    Raises
    ------
    TrainingFailure
        If the epoch loss turns non-finite (carries the epoch index).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0 or len(x) != len(y):
        raise ConfigurationError("fit needs non-empty, equal-length inputs and targets")
    loss_fn = _LOSSES.get(loss)
    if loss_fn is None:
        raise ConfigurationError(f"unknown loss {loss!r}")
    opt = optimizer if optimizer is not None else Adam()
    history = LossHistory()

    for epoch in range(epochs):
        rng = rtio.rng_from(seed, "epoch", epoch) if shuffle else None
        total, count = 0.0, 0
        for batch in iter_batches(len(x), batch_size, rng):
            pred = net.forward(x[batch], training=True)
            value, grad = loss_fn(pred, y[batch].astype(pred.dtype))
            if not np.isfinite(value):
                raise TrainingFailure(
                    f"training diverged at epoch {epoch}: loss={value}", epoch
                )
            net.backward(grad)
            opt.step(net.parameters(), net.gradients())
            total += value * len(batch)
            count += len(batch)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise TrainingFailure(
                f"training diverged at epoch {epoch}: loss={epoch_loss}", epoch
            )
        history.train.append(epoch_loss)
        if x_val is not None:
            pred = net.forward(np.asarray(x_val), training=False)
            val_loss, _ = loss_fn(pred, np.asarray(y_val).astype(pred.dtype))
            history.val.append(val_loss)
    return net, history
