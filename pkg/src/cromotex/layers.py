"""Forward/backward primitives for the encoder, heads and teacher.

Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes ``(cache, dout)`` and returns the input gradient first,
followed by parameter gradients. Weights follow the ``x @ W`` convention;
convolution kernels are ``(out_channels, in_channels, kernel)``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(x, dy):
    d_in = x.shape[-1]
    d_out = dy.shape[-1]
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    return dw, db


def conv1d_forward(x, w, b, stride):
    """Valid 1-D convolution. x: (B, C_in, T) -> (B, C_out, T_out)."""
    B, c_in, T = x.shape
    c_out, _, k = w.shape
    t_out = (T - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"sequence of length {T} too short for kernel {k}")
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride][:, :, :t_out]
    cols = win.transpose(0, 2, 1, 3).reshape(B * t_out, c_in * k)
    y = cols @ w.reshape(c_out, c_in * k).T + b
    y = y.reshape(B, t_out, c_out).transpose(0, 2, 1)
    return np.ascontiguousarray(y), (cols, x.shape, stride, t_out)


def conv1d_backward(cache, w, dy):
    cols, x_shape, stride, t_out = cache
    B, c_in, T = x_shape
    c_out, _, k = w.shape
    dy_flat = dy.transpose(0, 2, 1).reshape(B * t_out, c_out)
    dw = (dy_flat.T @ cols).reshape(w.shape)
    db = dy_flat.sum(axis=0)
    dcols = (dy_flat @ w.reshape(c_out, c_in * k)).reshape(B, t_out, c_in, k)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        dx[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(mask, dy):
    return dy * mask


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """BatchNorm over (B, L) per channel of x: (B, C, L).

    Returns ``(y, cache, (new_mean, new_var))``; running statistics are not
    modified in place.
    """
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        unbiased = var * n / max(n - 1, 1)
        new_stats = (
            (1 - momentum) * running_mean + momentum * mean,
            (1 - momentum) * running_var + momentum * unbiased,
        )
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = xhat * gamma[None, :, None] + beta[None, :, None]
    return y, (xhat, inv_std, gamma, train), new_stats


def batchnorm_backward(cache, dy):
    xhat, inv_std, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    if train:
        m_dxhat = dxhat.mean(axis=(0, 2), keepdims=True)
        m_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
        dx = (dxhat - m_dxhat - xhat * m_dxhat_xhat) * inv_std[None, :, None]
    else:
        dx = dxhat * inv_std[None, :, None]
    return dx, dgamma, dbeta


def layernorm_forward(x, gamma, beta, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layernorm_backward(cache, dy):
    xhat, inv_std, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) * inv_std
    return dx, dgamma, dbeta


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return x * cdf, (x, cdf)


def gelu_backward(cache, dy):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax_lastdim(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x, w_qkv, b_qkv, w_out, b_out, num_heads):
    """Multi-head self-attention. x: (B, L, d)."""
    B, L, d = x.shape
    dh = d // num_heads
    qkv = x @ w_qkv + b_qkv
    qkv = qkv.reshape(B, L, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    probs = softmax_lastdim((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = probs @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(B, L, d)
    out = merged @ w_out + b_out
    return out, (x, q, k, v, probs, merged, scale, num_heads)


def attention_backward(cache, w_qkv, w_out, dout):
    x, q, k, v, probs, merged, scale, num_heads = cache
    B, L, d = x.shape
    dh = d // num_heads
    dw_out, db_out = linear_backward(merged, dout)
    dmerged = dout @ w_out.T
    dctx = dmerged.reshape(B, L, num_heads, dh).transpose(0, 2, 1, 3)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * d)
    dw_qkv, db_qkv = linear_backward(x, dqkv)
    dx = dqkv @ w_qkv.T
    return dx, dw_qkv, db_qkv, dw_out, db_out


def dropout_forward(x, rate, rng):
    if rate == 0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


def l2_normalize_forward(x):
    """Row-wise unit normalization; zero rows stay zero and are flagged."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    degenerate = norm[..., 0] == 0
    safe = np.where(norm == 0, 1.0, norm)
    y = np.where(norm == 0, 0.0, x / safe).astype(x.dtype)
    return y, (y, safe, degenerate)


def l2_normalize_backward(cache, dy):
    y, norm, degenerate = cache
    dx = (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm
    dx[degenerate] = 0.0
    return dx
