"""Parameterized layers: Conv2d, Linear, BatchNorm2d.

Layers hold their parameters as tracked tensors and are constructed from an
explicit ``numpy.random.Generator`` so that two builds from the same seed are
bit-identical. Weight init is He-uniform (bound sqrt(6/fan_in)), biases zero.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, param, record


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = param(he_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                       fan_in, dtype))
        self.bias = param(np.zeros(out_channels, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, padding=self.padding)

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = param(he_uniform(rng, (in_features, out_features), in_features, dtype))
        self.bias = param(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    """Channelwise batch norm with running statistics.

    Normalization uses the biased batch variance; the running-variance update
    uses the unbiased estimate. ``training`` switches between batch and
    running statistics.
    """

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = param(np.ones(num_channels, dtype=dtype))
        self.beta = param(np.zeros(num_channels, dtype=dtype))
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.training = True
        # frozen layers stay in eval mode even when the network trains
        self.frozen = False

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError(f"batch norm expects NCHW input, got {x.ndim} dims")
        n, c, h, w = x.shape
        if c != self.num_channels:
            raise ValueError(f"batch norm built for {self.num_channels} channels, got {c}")
        xd = x.data
        gamma, beta = self.gamma, self.beta
        eps = self.eps

        if self.training:
            count = n * h * w
            if count <= 1:
                raise ValueError("batch norm in training mode needs more than one "
                                 "value per channel")
            mu = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
            mom = self.momentum
            self.running_mean = ((1.0 - mom) * self.running_mean + mom * mu).astype(
                self.running_mean.dtype)
            unbiased = var * count / (count - 1)
            self.running_var = ((1.0 - mom) * self.running_var + mom * unbiased).astype(
                self.running_var.dtype)
        else:
            inv = 1.0 / np.sqrt(self.running_var + eps)
            xhat = (xd - self.running_mean[None, :, None, None]) * inv[None, :, None, None]

        out = Tensor((gamma.data[None, :, None, None] * xhat
                      + beta.data[None, :, None, None]).astype(xd.dtype))
        need_x = x.tracked
        training = self.training

        def back(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            if not need_x:
                return None, dgamma, dbeta
            gs = g * gamma.data[None, :, None, None]
            if training:
                mean_gs = gs.mean(axis=(0, 2, 3), keepdims=True)
                mean_gsx = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gs - mean_gs - xhat * mean_gsx) * inv[None, :, None, None]
            else:
                dx = gs * inv[None, :, None, None]
            return dx.astype(g.dtype), dgamma, dbeta

        return record(out, (x, gamma, beta), back)

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.running_mean, self.running_var]

    def load_state_arrays(self, arrays):
        rm, rv = arrays
        self.running_mean = rm.astype(self.running_mean.dtype).copy()
        self.running_var = rv.astype(self.running_var.dtype).copy()
