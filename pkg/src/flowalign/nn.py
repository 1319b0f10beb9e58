"""Dense-layer primitives with explicit backward passes.

Everything is plain numpy; forward functions return caches that the matching
backward functions consume. Parameter shapes follow the convention
w: [d_in, d_out], so y = x @ w + b.
"""
from __future__ import annotations

import numpy as np


def linear(x, w, b):
    # flatten leading axes so the matmul is one large GEMM
    y = x.reshape(-1, x.shape[-1]) @ w
    y += b
    return y.reshape(*x.shape[:-1], w.shape[1])


def linear_bwd(x, w, dy):
    """Returns (dx, dw, db). Leading axes of x/dy are flattened for dw."""
    d_in, d_out = w.shape
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def sigmoid(x):
    out = np.exp(-x)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def silu(x):
    return x * sigmoid(x)


def silu_cached(x):
    """Returns (silu(x), sigmoid(x)); the cache avoids re-exponentiating."""
    s = sigmoid(x)
    return x * s, s


def silu_bwd(x, dy, s=None):
    if s is None:
        s = sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


LN_EPS = 1e-6


def layernorm(x, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance (no affine).

    Returns (y, cache); cache holds what the backward needs.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


def layernorm_bwd(cache, dy):
    y, inv = cache
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * y).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - y * m2)


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_bwd(a, da):
    # a = softmax(x); returns dx
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


def split_heads(x, n_heads):
    """[B, L, D] -> [B, H, L, D/H]."""
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    """[B, H, L, hd] -> [B, L, H*hd]."""
    b, h, l, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * hd)


def attention(q, k, v):
    """Scaled dot-product attention on [B, H, L, hd] tensors.

    Returns (out, cache). No masking: every query attends to every key.
    """
    hd = q.shape[-1]
    scale = 1.0 / np.sqrt(hd)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    a = softmax(logits)
    out = a @ v
    return out, (q, k, v, a, scale)


def attention_bwd(cache, dout):
    q, k, v, a, scale = cache
    da = dout @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dout
    dlogits = softmax_bwd(a, da)
    dq = (dlogits @ k) * scale
    dk = (dlogits.transpose(0, 1, 3, 2) @ q) * scale
    return dq, dk, dv


def sinusoid_table(n_pos, dim, dtype=np.float32):
    """Fixed sinusoidal position table [n_pos, dim]; first half sin, second cos."""
    half = dim // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.arange(n_pos)[:, None] * freq[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2 == 1:
        table = np.concatenate([table, np.zeros((n_pos, 1))], axis=1)
    return table.astype(dtype)
