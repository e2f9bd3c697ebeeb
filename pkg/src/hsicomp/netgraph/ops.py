"""NHWC numpy kernels with their backward passes.

Weights are stored (out_filters, k_h, k_w, in_channels). Convolutions use
same (zero) padding; transposed convolutions are 2x2 with stride 2.
"""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w, c)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    cols = np.empty((n, h, w, kh, kw, c), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xp[:, a:a + h, b:b + w, :]
    return cols.reshape(n * h * w, kh * kw * c)


def col2im(dcols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = shape
    if kh == 1 and kw == 1:
        return dcols.reshape(n, h, w, c)
    ph, pw = kh // 2, kw // 2
    d = dcols.reshape(n, h, w, kh, kw, c)
    dxp = np.zeros((n, h + kh - 1, w + kw - 1, c), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + h, b:b + w, :] += d[:, :, :, a, b, :]
    return dxp[:, ph:ph + h, pw:pw + w, :]


def conv2d(x, weight, bias, want_cache=False):
    o, kh, kw, c = weight.shape
    if x.shape[-1] != c:
        raise ValueError(f"conv expects {c} input channels, got {x.shape[-1]}")
    n, h, w, _ = x.shape
    cols = im2col(x, kh, kw)
    y = cols @ weight.reshape(o, -1).T
    y += bias
    y = y.reshape(n, h, w, o)
    return (y, cols) if want_cache else (y, None)


def conv2d_backward(dy, x_shape, cols, weight):
    o, kh, kw, c = weight.shape
    d2 = dy.reshape(-1, o)
    dw = (d2.T @ cols).reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = col2im(d2 @ weight.reshape(o, -1), x_shape, kh, kw)
    return dx, dw, db


def tconv2d(x, weight, bias):
    """y[n, 2h+a, 2w+b, o] = sum_i x[n, h, w, i] * weight[o, a, b, i] + bias[o]."""
    o, kh, kw, c = weight.shape
    if x.shape[-1] != c:
        raise ValueError(f"transposed conv expects {c} input channels, got {x.shape[-1]}")
    n, h, w, _ = x.shape
    wm = weight.transpose(3, 1, 2, 0).reshape(c, kh * kw * o)
    y = (x.reshape(-1, c) @ wm).reshape(n, h, w, kh, kw, o)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, h * kh, w * kw, o)
    y += bias
    return y


def tconv2d_backward(dy, x, weight):
    o, kh, kw, c = weight.shape
    n, h, w, _ = x.shape
    d = dy.reshape(n, h, kh, w, kw, o).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * w, kh * kw * o)
    x2 = x.reshape(-1, c)
    wm = weight.transpose(3, 1, 2, 0).reshape(c, kh * kw * o)
    dx = (d @ wm.T).reshape(x.shape)
    dwm = x2.T @ d  # (c, kh*kw*o)
    dw = dwm.reshape(c, kh, kw, o).transpose(3, 1, 2, 0)
    db = dy.reshape(-1, o).sum(axis=0)
    return dx, np.ascontiguousarray(dw), db


def maxpool2(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx, x_shape):
    n, h, w, c = x_shape
    dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def batchnorm_train(x, gamma, beta, eps):
    axes = (0, 1, 2)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, mu, var)


def batchnorm_eval(x, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    return x * scale + (beta - mean * scale)


def batchnorm_backward(dy, cache, gamma):
    xhat, inv, _, _ = cache
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    axes = (0, 1, 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
