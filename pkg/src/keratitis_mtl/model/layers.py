"""Forward/backward pairs for the few layers the reference network needs.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
(plus parameter gradients where the layer has parameters). Images are NHWC.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def dense_forward(x, w, b):
    return x @ w + b, x


def dense_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def conv3x3_forward(x, w, b):
    """Stride-1, zero-padded 3x3 convolution. x: (N, H, W, Cin), w: (3, 3, Cin, Cout)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, Cin, 3, 3)
    out = np.einsum("nhwcij,ijco->nhwo", cols, w, optimize=True) + b
    return out, xp


def conv3x3_backward(dout, xp, w):
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.einsum("nhwcij,nhwo->ijco", cols, dout, optimize=True)
    db = dout.sum(axis=(0, 1, 2))
    n, h, wd, _ = dout.shape
    dxp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dout @ w[i, j].T
    return dxp[:, 1:-1, 1:-1, :], dw, db


def avgpool_forward(x, size=3, stride=2, pad=1):
    """Average pooling with zero padding counted in the divisor."""
    n, h, w, c = x.shape
    ho = (h + 2 * pad - size) // stride + 1
    wo = (w + 2 * pad - size) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((n, ho, wo, c))
    for i in range(size):
        for j in range(size):
            out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return out / (size * size), (x.shape, size, stride, pad, ho, wo)


def avgpool_backward(dout, cache):
    shape, size, stride, pad, ho, wo = cache
    n, h, w, c = shape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    g = dout / (size * size)
    for i in range(size):
        for j in range(size):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g
    return dxp[:, pad:pad + h, pad:pad + w, :]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training):
    """Returns (out, cache, new_running_mean, new_running_var)."""
    if training:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, training), new_mean, new_var


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def sigmoid(z):
    return expit(z)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
