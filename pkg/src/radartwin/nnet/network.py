"""Sequential network container and its versioned binary file format."""

import json
import struct

import numpy as np

from .. import io as rtio
from ..errors import ConfigurationError, StateError
from .layers import Layer, layer_from_spec

_MAGIC = b"RTNN"
_FORMAT_VERSION = 1


class Network:
    """Ordered layers over a fixed input shape.

    Parameters are materialized at construction from a seeded generator, so
    (specs, input_shape, dtype, seed) fully determines the network.
    """

    def __init__(self, layers, input_shape, dtype=np.float32, seed=0):
        if isinstance(dtype, str):
            dtype = np.dtype(dtype).type
        self.dtype = np.dtype(dtype).type
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.layers: list[Layer] = [
            layer_from_spec(sp) if isinstance(sp, dict) else sp for sp in layers
        ]
        rng = rtio.rng_from(self.seed, "init")
        shape = self.input_shape
        self._ladder = [shape]
        for layer in self.layers:
            layer.build(shape, rng, self.dtype)
            shape = layer.out_shape(shape)
            self._ladder.append(shape)
        self.output_shape = shape
        self._training_ready = False

    # -- introspection -----------------------------------------------------
    def shape_ladder(self):
        """Input shape followed by every layer's output shape."""
        return list(self._ladder)

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def gradients(self):
        return [g for layer in self.layers for g in layer.grads]

    @property
    def num_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grads(self):
        for g in self.gradients():
            g[...] = 0

    # -- compute -----------------------------------------------------------
    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape[1:]} does not match network input "
                f"{self.input_shape}"
            )
        for layer, expected in zip(self.layers, self._ladder[1:]):
            x = layer.forward(x, training=training)
            if x.shape[1:] != expected:
                raise ConfigurationError(
                    f"{type(layer).__name__} produced {x.shape[1:]}, expected {expected}"
                )
        self._training_ready = training
        return x

    def activations(self, x):
        """Forward pass retaining every layer output (inference mode)."""
        x = np.asarray(x, dtype=self.dtype)
        outs = []
        for layer in self.layers:
            x = layer.forward(x, training=False)
            outs.append(x)
        return outs

    def backward(self, loss_grad):
        """Backpropagate; fills every layer's gradient buffers and returns
        the gradient with respect to the network input."""
        if not self._training_ready:
            raise StateError("backward requires a prior forward in training mode")
        grad = np.asarray(loss_grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        for g in self.gradients():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient encountered")
        return grad

    # -- persistence ---------------------------------------------------------
    def save(self, path):
        save_network(self, path)

    @classmethod
    def load(cls, path):
        return load_network(path)


def save_network(net: Network, path):
    """Versioned binary: magic + header JSON + raw little-endian buffers."""
    header = {
        "format": "radartwin-network",
        "version": _FORMAT_VERSION,
        "dtype": np.dtype(net.dtype).name,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "layers": net.specs(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for layer in net.layers:
            for buf in list(layer.params) + list(layer.state):
                f.write(np.ascontiguousarray(
                    buf, dtype=np.dtype(buf.dtype).newbyteorder("<")).tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ConfigurationError(f"{path}: not a network file")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != _FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported format version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        net = Network(
            header["layers"],
            header["input_shape"],
            dtype=header["dtype"],
            seed=header.get("seed", 0),
        )
        for layer in net.layers:
            for buf in list(layer.params) + list(layer.state):
                raw = f.read(buf.size * buf.itemsize)
                if len(raw) != buf.size * buf.itemsize:
                    raise ConfigurationError(f"{path}: truncated parameter data")
                buf[...] = np.frombuffer(
                    raw, dtype=np.dtype(buf.dtype).newbyteorder("<")
                ).reshape(buf.shape)
        extra = f.read(1)
        if extra:
            raise ConfigurationError(f"{path}: trailing data after parameters")
    return net
