"""Layer kernels on NHWC batches.

Each layer is a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` taking the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numba import njit


class ShapeError(ValueError):
    pass


def _im2col(x, k):
    # (N, H, W, C) -> (N*H*W, k*k*C), same padding, columns ordered (kh, kw, c)
    n, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    cols = np.empty((n, h, w, k * k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(n * h * w, k * k * c)


def conv2d_forward(x, kernels, bias):
    """Stride-1 zero-padded ("same") convolution.

    ``x`` is ``(N, H, W, Cin)``, ``kernels`` ``(k, k, Cin, Cout)`` with odd ``k``.
    """
    k, k2, cin, cout = kernels.shape
    if x.ndim != 4 or x.shape[3] != cin or k != k2 or k % 2 == 0 or bias.shape != (cout,):
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    n, h, w, _ = x.shape
    cols = _im2col(x, k)
    y = cols @ kernels.reshape(k * k * cin, cout) + bias
    return y.reshape(n, h, w, cout), (cols, x.shape, kernels)


def _col2im(dcols, xshape, k):
    # adjoint of _im2col: scatter-add column blocks back onto the padded input
    n, h, w, c = xshape
    p = k // 2
    dcols = dcols.reshape(n, h, w, k * k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w] += dcols[:, :, :, i * k + j]
    return dxp[:, p:p + h, p:p + w]


def conv2d_backward(dy, cache, need_dx=True):
    cols, xshape, kernels = cache
    k, _, cin, cout = kernels.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(kernels.shape)
    db = dy2.sum(axis=0)
    dx = None
    if need_dx:
        dx = _col2im(dy2 @ kernels.reshape(k * k * cin, cout).T, xshape, k)
    return dx, dw, db


@njit(cache=True)
def _pool_kernel(x):
    n, h, w, c = x.shape
    y = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty((n, h // 2, w // 2, c), dtype=np.uint8)
    for b in range(n):
        for r in range(h // 2):
            for s in range(w // 2):
                for ch in range(c):
                    # strict ">" keeps the first (top-left, row-major) maximum
                    best = x[b, 2 * r, 2 * s, ch]
                    a = 0
                    v = x[b, 2 * r, 2 * s + 1, ch]
                    if v > best:
                        best = v
                        a = 1
                    v = x[b, 2 * r + 1, 2 * s, ch]
                    if v > best:
                        best = v
                        a = 2
                    v = x[b, 2 * r + 1, 2 * s + 1, ch]
                    if v > best:
                        best = v
                        a = 3
                    y[b, r, s, ch] = best
                    arg[b, r, s, ch] = a
    return y, arg


@njit(cache=True)
def _unpool_kernel(dy, arg, dx):
    n, h2, w2, c = dy.shape
    for b in range(n):
        for r in range(h2):
            for s in range(w2):
                for ch in range(c):
                    a = arg[b, r, s, ch]
                    dx[b, 2 * r + a // 2, 2 * s + a % 2, ch] = dy[b, r, s, ch]


def maxpool2_forward(x):
    """2x2 max pooling; gradient goes to the top-left-most maximum of a block."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    y, arg = _pool_kernel(np.ascontiguousarray(x))
    return y, (arg, x.shape)


def maxpool2_backward(dy, cache):
    arg, xshape = cache
    dx = np.zeros(xshape, dtype=dy.dtype)
    _unpool_kernel(np.ascontiguousarray(dy), arg, dx)
    return dx


def dense_forward(x, weights, bias):
    """``y = x W + b`` with ``weights`` of shape ``(in, out)``."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights + bias, (x, weights)


def dense_backward(dy, cache):
    x, weights = cache
    return dy @ weights.T, x.T @ dy, dy.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(dy, mask):
    return dy * mask


def dropout_forward(x, rate, train, rng):
    """Inverted dropout: survivors scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch; returns ``(loss, probs, dlogits)``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = probs.copy()
    grad[rows, labels] -= 1
    return float(loss), probs, grad / n
