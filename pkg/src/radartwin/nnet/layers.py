"""Layer implementations with explicit forward/backward passes."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, StateError


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base layer.  Parameters and gradients are parallel lists of arrays;
    ``state`` holds non-trainable buffers (e.g. batch-norm running stats)."""

    def __init__(self):
        self.params = []
        self.grads = []
        self.state = []
        self._cache = None

    # -- shape/params ------------------------------------------------------
    def out_shape(self, in_shape):
        return in_shape

    def build(self, in_shape, rng, dtype):
        """Allocate parameters for a given input shape (no-op by default)."""

    def spec(self) -> dict:
        raise NotImplementedError

    # -- compute -----------------------------------------------------------
    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise StateError(
                f"{type(self).__name__}.backward called without a training forward"
            )


class Conv2d(Layer):
    def __init__(self, out_channels, kernel=3, stride=1, padding=0, in_channels=None):
        super().__init__()
        if kernel < 1 or stride < 1 or padding < 0:
            raise ConfigurationError("conv2d needs kernel, stride >= 1 and padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"conv2d expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.in_channels is not None and self.in_channels != c:
            raise ConfigurationError(
                f"conv2d expects {self.in_channels} input channels, got {c}"
            )
        h_out = conv_out_size(h, self.kernel, self.stride, self.padding)
        w_out = conv_out_size(w, self.kernel, self.stride, self.padding)
        if h_out < 1 or w_out < 1:
            raise ConfigurationError(
                f"conv2d output collapses: input {in_shape}, kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return (self.out_channels, h_out, w_out)

    def build(self, in_shape, rng, dtype):
        self.in_channels = in_shape[0]
        fan_in = self.in_channels * self.kernel * self.kernel
        w = _he_uniform(rng, (self.out_channels, self.in_channels, self.kernel, self.kernel),
                        fan_in, dtype)
        b = np.zeros(self.out_channels, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]

    def spec(self):
        return {
            "type": "conv2d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }

    def _im2col(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k)
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
        return x.shape, cols

    def forward(self, x, training=False):
        w, b = self.params
        padded_shape, cols = self._im2col(x)
        batch, h_out, w_out = cols.shape[0], cols.shape[1], cols.shape[2]
        flat = cols.reshape(batch * h_out * w_out, -1)
        w_mat = w.reshape(self.out_channels, -1)
        y = (flat @ w_mat.T + b).reshape(batch, h_out, w_out, self.out_channels)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
        if training:
            self._cache = (flat, padded_shape, x.shape, (h_out, w_out))
        return y

    def backward(self, dy):
        self._require_cache()
        flat, padded_shape, in_shape, (h_out, w_out) = self._cache
        w, _ = self.params
        batch = dy.shape[0]
        dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(
            batch * h_out * w_out, self.out_channels
        )

        w_mat = w.reshape(self.out_channels, -1)
        self.grads[0][...] = (dy_mat.T @ flat).reshape(w.shape)
        self.grads[1][...] = dy_mat.sum(axis=0)

        dcols = (dy_mat @ w_mat).reshape(
            batch, h_out, w_out, self.in_channels, self.kernel, self.kernel
        )
        k, s, p = self.kernel, self.stride, self.padding
        dx_padded = np.zeros(padded_shape, dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dx_padded[:, :, ki:ki + s * h_out:s, kj:kj + s * w_out:s] += (
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        if p:
            dx = dx_padded[:, :, p:-p, p:-p]
        else:
            dx = dx_padded
        return np.ascontiguousarray(dx[:, :, :in_shape[2], :in_shape[3]])


class Dense(Layer):
    """Fully connected layer; flattens any trailing input dimensions."""

    def __init__(self, out_features, in_features=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features

    def out_shape(self, in_shape):
        feats = int(np.prod(in_shape))
        if self.in_features is not None and self.in_features != feats:
            raise ConfigurationError(
                f"dense expects {self.in_features} input features, got {feats}"
            )
        return (self.out_features,)

    def build(self, in_shape, rng, dtype):
        self.in_features = int(np.prod(in_shape))
        w = _he_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)
        b = np.zeros(self.out_features, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]

    def spec(self):
        return {"type": "dense", "in_features": self.in_features,
                "out_features": self.out_features}

    def forward(self, x, training=False):
        w, b = self.params
        flat = x.reshape(x.shape[0], -1)
        if training:
            self._cache = (flat, x.shape)
        return flat @ w.T + b

    def backward(self, dy):
        self._require_cache()
        flat, in_shape = self._cache
        w, _ = self.params
        self.grads[0][...] = dy.T @ flat
        self.grads[1][...] = dy.sum(axis=0)
        return (dy @ w).reshape(in_shape)


class ReLU(Layer):
    def spec(self):
        return {"type": "relu"}

    def forward(self, x, training=False):
        if training:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        self._require_cache()
        return dy * self._cache


class LeakyReLU(Layer):
    def __init__(self, alpha=0.1):
        super().__init__()
        self.alpha = alpha

    def spec(self):
        return {"type": "leaky_relu", "alpha": self.alpha}

    def forward(self, x, training=False):
        if training:
            self._cache = x > 0
        return np.where(x > 0, x, self.alpha * x)

    def backward(self, dy):
        self._require_cache()
        return np.where(self._cache, dy, self.alpha * dy)


class Sigmoid(Layer):
    def spec(self):
        return {"type": "sigmoid"}

    def forward(self, x, training=False):
        # numerically stable logistic
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        if training:
            self._cache = y
        return y

    def backward(self, dy):
        self._require_cache()
        y = self._cache
        return dy * y * (1.0 - y)


class Tanh(Layer):
    def spec(self):
        return {"type": "tanh"}

    def forward(self, x, training=False):
        y = np.tanh(x)
        if training:
            self._cache = y
        return y

    def backward(self, dy):
        self._require_cache()
        y = self._cache
        return dy * (1.0 - y * y)


class MaxPool(Layer):
    """Non-overlapping max pooling (stride = window size)."""

    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ConfigurationError("max_pool size must be >= 1")
        self.size = size

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ConfigurationError(
                f"max_pool size {self.size} must divide the input {in_shape}"
            )
        return (c, h // self.size, w // self.size)

    def spec(self):
        return {"type": "max_pool", "size": self.size}

    def forward(self, x, training=False):
        s = self.size
        b, c, h, w = x.shape
        windows = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        flat = windows.reshape(b, c, h // s, w // s, s * s)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if training:
            self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        self._require_cache()
        idx, in_shape = self._cache
        s = self.size
        b, c, h, w = in_shape
        flat = np.zeros((b, c, h // s, w // s, s * s), dtype=dy.dtype)
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        windows = flat.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return windows.reshape(b, c, h, w)


class BatchNorm(Layer):
    """Batch normalization over the batch (and spatial dims for NCHW input)."""

    def __init__(self, momentum=0.9, eps=1e-5, channels=None):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.channels = channels

    def out_shape(self, in_shape):
        return in_shape

    def build(self, in_shape, rng, dtype):
        self.channels = in_shape[0]
        gamma = np.ones(self.channels, dtype=dtype)
        beta = np.zeros(self.channels, dtype=dtype)
        self.params = [gamma, beta]
        self.grads = [np.zeros_like(gamma), np.zeros_like(beta)]
        self.state = [np.zeros(self.channels, dtype=dtype),
                      np.ones(self.channels, dtype=dtype)]  # running mean, var

    def spec(self):
        return {"type": "batch_norm", "momentum": self.momentum, "eps": self.eps,
                "channels": self.channels}

    def _axes_and_shape(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise ConfigurationError(f"batch_norm expects 2-D or 4-D input, got {x.ndim}-D")

    def forward(self, x, training=False):
        gamma, beta = self.params
        axes, bshape = self._axes_and_shape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            run_mean, run_var = self.state
            run_mean *= self.momentum
            run_mean += (1.0 - self.momentum) * mean
            run_var *= self.momentum
            run_var += (1.0 - self.momentum) * var
        else:
            mean, var = self.state
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = gamma.reshape(bshape) * x_hat + beta.reshape(bshape)
        if training:
            self._cache = (x_hat, inv_std, axes, bshape)
        return y

    def backward(self, dy):
        self._require_cache()
        x_hat, inv_std, axes, bshape = self._cache
        gamma, _ = self.params
        self.grads[0][...] = (dy * x_hat).sum(axis=axes)
        self.grads[1][...] = dy.sum(axis=axes)
        dxhat = dy * gamma.reshape(bshape)
        dx = (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - x_hat * (dxhat * x_hat).mean(axis=axes, keepdims=True)
        ) * inv_std.reshape(bshape)
        return dx


class Upsample2x(Layer):
    """Nearest-neighbor 2x spatial upsampling (decoder counterpart of stride 2)."""

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)

    def spec(self):
        return {"type": "upsample2x"}

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        self._require_cache()
        b, c, h, w = self._cache
        return dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


_LAYER_TYPES = {
    "conv2d": Conv2d,
    "dense": Dense,
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "max_pool": MaxPool,
    "batch_norm": BatchNorm,
    "upsample2x": Upsample2x,
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("type", None)
    cls = _LAYER_TYPES.get(kind)
    if cls is None:
        raise ConfigurationError(f"unknown layer type {kind!r}")
    return cls(**spec)
