"""Dense layers with hand-written backward passes, plus Adam.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Caches are per call, so one layer can be applied
several times in a single graph and back-propagated through each use.

Arrays keep the dtype they come in with. Model parameters are float32; the
gradient tests run the same code in float64.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# -- stateless layers --------------------------------------------------------

def affine_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: x{x.shape} @ W{W.shape} + b{b.shape}")
    return x @ W + b, (x, W)


def affine_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def layer_norm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def dropout_forward(x, keep_prob, rng=None, train=True):
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout keep probability must be in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return x, None
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(dy, cache):
    y, axis = cache
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    y = _sigmoid(np.asarray(x))
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def logsigmoid_forward(x):
    x = np.asarray(x)
    return -np.logaddexp(0, -x).astype(x.dtype, copy=False), x


def logsigmoid_backward(dy, x):
    return dy * _sigmoid(-x)


def conv1d_forward(x, K, b=None):
    """Valid cross-correlation. ``x`` is ``(batch, c_in, length)``,
    ``K`` is ``(c_out, c_in, width)``."""
    if x.ndim != 3 or K.ndim != 3 or x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv1d: x{x.shape} with kernels {K.shape}")
    width = K.shape[2]
    if x.shape[2] < width:
        raise DimensionError(f"conv1d: input length {x.shape[2]} < kernel width {width}")
    win = sliding_window_view(x, width, axis=2)  # (batch, c_in, l_out, width)
    y = np.einsum("bclk,ock->bol", win, K, optimize=True)
    if b is not None:
        y = y + b[None, :, None]
    return y, (x, K, b is not None)


def conv1d_backward(dy, cache):
    x, K, has_bias = cache
    width = K.shape[2]
    l_out = dy.shape[2]
    win = sliding_window_view(x, width, axis=2)
    dK = np.einsum("bol,bclk->ock", dy, win, optimize=True)
    dx = np.zeros_like(x)
    for j in range(width):
        dx[:, :, j:j + l_out] += np.einsum("bol,oc->bcl", dy, K[:, :, j], optimize=True)
    db = dy.sum(axis=(0, 2)) if has_bias else None
    return dx, dK, db


def maxpool1d_forward(x, window):
    """Non-overlapping max over the last axis; a ragged tail is dropped."""
    length = x.shape[-1]
    if length < window:
        raise DimensionError(f"maxpool: length {length} < window {window}")
    n = length // window
    blocks = x[..., :n * window].reshape(*x.shape[:-1], n, window)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx, window)


def maxpool1d_backward(dy, cache):
    shape, idx, window = cache
    n = idx.shape[-1]
    blocks = np.zeros((*shape[:-1], n, window), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[..., :n * window] = blocks.reshape(*shape[:-1], n * window)
    return dx


# -- parameters and parameterised layers ------------------------------------

class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def glorot(rng, fan_in, fan_out, shape=None, dtype=DTYPE):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)).astype(dtype)


class Module:
    def parameters(self):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, name, n_in, n_out, rng, dtype=DTYPE):
        self.W = Parameter(f"{name}.W", glorot(rng, n_in, n_out, dtype=dtype))
        self.b = Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype))

    @property
    def n_in(self):
        return self.W.shape[0]

    @property
    def n_out(self):
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        return affine_forward(x, self.W.value, self.b.value)

    def backward(self, dy, cache):
        dx, dW, db = affine_backward(dy, cache)
        self.W.grad += dW
        self.b.grad += db
        return dx


class LayerNorm(Module):
    def __init__(self, name, dim, dtype=DTYPE, eps=1e-5):
        self.gain = Parameter(f"{name}.gain", np.ones(dim, dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def parameters(self):
        return [self.gain, self.bias]

    def forward(self, x):
        return layer_norm_forward(x, self.gain.value, self.bias.value, self.eps)

    def backward(self, dy, cache):
        dx, dg, db = layer_norm_backward(dy, cache)
        self.gain.grad += dg
        self.bias.grad += db
        return dx


class Conv1d(Module):
    def __init__(self, name, c_in, c_out, width, rng, dtype=DTYPE):
        self.K = Parameter(f"{name}.K", glorot(rng, c_in * width, c_out * width, (c_out, c_in, width), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def parameters(self):
        return [self.K, self.b]

    def forward(self, x):
        return conv1d_forward(x, self.K.value, self.b.value)

    def backward(self, dy, cache):
        dx, dK, db = conv1d_backward(dy, cache)
        self.K.grad += dK
        self.b.grad += db
        return dx


class MLP(Module):
    """Affine layers with ReLU between them and none after the last."""

    def __init__(self, name, dims, rng, dtype=DTYPE):
        if len(dims) < 2:
            raise ValueError("MLP needs at least an input and an output size")
        self.layers = [Linear(f"{name}.{i}", a, b, rng, dtype) for i, (a, b) in enumerate(zip(dims, dims[1:]))]

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        caches = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            m = None
            if i < last:
                x, m = relu_forward(x)
            caches.append((c, m))
        return x, caches

    def backward(self, dy, caches):
        for layer, (c, m) in zip(reversed(self.layers), reversed(caches)):
            if m is not None:
                dy = relu_backward(dy, m)
            dy = layer.backward(dy, c)
        return dy


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                bad = int(np.count_nonzero(~np.isfinite(p.grad)))
                raise NonFiniteGradientError(f"{bad} non-finite gradient entries in {p.name}; step rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.value -= step.astype(p.value.dtype, copy=False)
            p.grad[...] = 0
