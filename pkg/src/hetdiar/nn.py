"""Minimal reverse-mode layers for the embedding network.

Everything runs in float64 numpy. Each layer's ``forward`` returns
``(output, cache)`` and leaves the layer untouched, so inference on a
frozen model is thread-safe; ``backward`` consumes the cache, returns
the input gradient, and accumulates parameter gradients on the layer
(training is single-threaded by contract).

Stride-2 convolutions pad one zero row/column at the trailing edge so
every downsampling stage floor-halves its spatial dims exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericError


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """2-D convolution over NCHW tensors via im2col."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, pad: tuple[tuple[int, int], tuple[int, int]],
                 rng: np.random.Generator, name: str):
        self.stride = stride
        self.pad = pad
        self.name = name
        fan_in = in_channels * kernel * kernel
        self.w = _fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.b = np.zeros(out_channels)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh = self.w.shape[2]
        ho = (h + sum(self.pad[0]) - kh) // self.stride + 1
        wo = (w + sum(self.pad[1]) - kh) // self.stride + 1
        return ho, wo

    def forward(self, x: np.ndarray):
        batch, _, h, w = x.shape
        kh = self.w.shape[2]
        ho, wo = self.out_size(h, w)
        if ho < 1 or wo < 1:
            raise DataError(
                f"{self.name}: input {h}x{w} too small for kernel {kh} stride {self.stride}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), self.pad[0], self.pad[1]))
        win = sliding_window_view(xp, (kh, kh), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        col = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, -1)
        y = col @ self.w.reshape(self.w.shape[0], -1).T + self.b
        y = y.reshape(batch, ho, wo, -1).transpose(0, 3, 1, 2)
        return y, (col, xp.shape, (batch, h, w, ho, wo))

    def backward(self, dy: np.ndarray, cache):
        col, xp_shape, (batch, h, w, ho, wo) = cache
        kh = self.w.shape[2]
        dyt = dy.transpose(0, 2, 3, 1).reshape(batch * ho * wo, -1)
        self.gw += (dyt.T @ col).reshape(self.w.shape)
        self.gb += dyt.sum(axis=0)
        dcol = (dyt @ self.w.reshape(self.w.shape[0], -1))
        dcol = dcol.reshape(batch, ho, wo, -1, kh, kh).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kh):
                dxp[:, :, i:i + self.stride * ho:self.stride,
                    j:j + self.stride * wo:self.stride] += dcol[:, :, :, :, i, j]
        (pt, pb), (pl, pr) = self.pad
        return dxp[:, :, pt:pt + h, pl:pl + w]

    def params(self):
        return [(f"{self.name}.w", self.w, self.gw), (f"{self.name}.b", self.b, self.gb)]


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str):
        self.name = name
        self.w = _fan_in_uniform(rng, (out_features, in_features), in_features)
        self.b = np.zeros(out_features)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x: np.ndarray):
        return x @ self.w.T + self.b, x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        self.gw += dy.T @ x
        self.gb += dy.sum(axis=0)
        return dy @ self.w

    def params(self):
        return [(f"{self.name}.w", self.w, self.gw), (f"{self.name}.b", self.b, self.gb)]


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def global_avg_pool(x: np.ndarray):
    """Mean over the spatial axes of an NCHW tensor."""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, shape) -> np.ndarray:
    _, _, h, w = shape
    return np.broadcast_to(dy[:, :, None, None], shape) / (h * w)


class ResidualBlock:
    """Two 3x3 convolutions with an identity (or strided 1x1) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool,
                 rng: np.random.Generator, name: str):
        stride = 2 if downsample else 1
        pad = ((0, 1), (0, 1)) if downsample else ((1, 1), (1, 1))
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, pad, rng, f"{name}.conv1")
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, ((1, 1), (1, 1)), rng,
                            f"{name}.conv2")
        self.proj = None
        if downsample or in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, stride, ((0, 0), (0, 0)),
                               rng, f"{name}.proj")

    def forward(self, x: np.ndarray):
        h1, c1 = self.conv1.forward(x)
        a1, m1 = relu(h1)
        h2, c2 = self.conv2.forward(a1)
        if self.proj is not None:
            shortcut, cp = self.proj.forward(x)
            # a strided 1x1 shortcut can run one row/col long on odd inputs
            trim = shortcut.shape[2] - h2.shape[2], shortcut.shape[3] - h2.shape[3]
            shortcut = shortcut[:, :, :h2.shape[2], :h2.shape[3]]
        else:
            shortcut, cp, trim = x, None, (0, 0)
        out, m_out = relu(h2 + shortcut)
        return out, (c1, m1, c2, cp, trim, m_out, h2.shape)

    def backward(self, dy: np.ndarray, cache):
        c1, m1, c2, cp, trim, m_out, h2_shape = cache
        dsum = relu_backward(dy, m_out)
        dx_main = self.conv1.backward(relu_backward(self.conv2.backward(dsum, c2), m1), c1)
        if self.proj is not None:
            dshort = dsum
            if trim != (0, 0):
                dshort = np.pad(dsum, ((0, 0), (0, 0), (0, trim[0]), (0, trim[1])))
            dx_main = dx_main + self.proj.backward(dshort, cp)
        else:
            dx_main = dx_main + dsum
        return dx_main

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        if self.proj is not None:
            out += self.proj.params()
        return out


def soft_cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean soft-label cross entropy and its logit gradient.

    Uses max-subtraction for a stable log-softmax; labels must be
    row-stochastic.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_softmax = shifted - log_z
    loss = float(-(labels * log_softmax).sum(axis=1).mean())
    dlogits = (np.exp(log_softmax) - labels) / logits.shape[0]
    return loss, dlogits


class SgdMomentum:
    """SGD with classical momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for _, p, _ in self.params]

    def zero_grad(self):
        for _, _, g in self.params:
            g[...] = 0.0

    def check_finite(self):
        for name, _, g in self.params:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")

    def step(self):
        for v, (_, p, g) in zip(self.velocity, self.params):
            v *= self.momentum
            v += g
            p -= self.learning_rate * v
