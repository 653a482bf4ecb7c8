"""Minimal deterministic neural engine (numpy, CPU).

Sequential networks over float32/float64 numpy buffers with exact
reproducibility: seeded He-uniform init, fixed batch order, fixed
accumulation order.  Conv inputs are NCHW.
"""

from .layers import (
    Layer,
    Conv2d,
    Dense,
    ReLU,
    LeakyReLU,
    Sigmoid,
    Tanh,
    MaxPool,
    BatchNorm,
    Upsample2x,
    layer_from_spec,
)
from .network import Network, save_network, load_network
from .optim import Adam
from .training import fit, LossHistory, mse_loss, l1_loss, bce_loss
from .gradcheck import check_gradients

__all__ = [
    "Layer", "Conv2d", "Dense", "ReLU", "LeakyReLU", "Sigmoid", "Tanh",
    "MaxPool", "BatchNorm", "Upsample2x", "layer_from_spec",
    "Network", "save_network", "load_network",
    "Adam", "fit", "LossHistory", "mse_loss", "l1_loss", "bce_loss",
    "check_gradients",
]
