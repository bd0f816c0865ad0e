"""Forward/backward kernels for the layer types the model uses.

Activations are ``(batch, channels, frames)`` float64 arrays. ``mask`` is a
``(batch, 1, frames)`` array of 0/1 marking valid frames; every layer keeps
padded frames at exactly zero so same-padded convolutions see the zeros an
unpadded utterance would.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

BN_EPS = 1e-5
POOL_EPS = 1e-9


def length_mask(lengths, T: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)[:, None, :]


# --- convolutions ------------------------------------------------------------


def dwconv_forward(x, w):
    """Depthwise same-padded conv: x (B, C, T), w (C, k)."""
    k = w.shape[1]
    p = k // 2
    T = x.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    out = w[:, 0, None] * xp[:, :, 0:T]
    for j in range(1, k):
        out += w[:, j, None] * xp[:, :, j : j + T]
    return out, xp


def dwconv_backward(dout, xp, w):
    k = w.shape[1]
    p = k // 2
    T = dout.shape[2]
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for j in range(k):
        dw[:, j] = np.einsum("bct,bct->c", dout, xp[:, :, j : j + T])
        dxp[:, :, j : j + T] += w[:, j, None] * dout
    return dxp[:, :, p : p + T], dw


def pwconv_forward(x, w):
    """Pointwise (1x1) conv: x (B, Cin, T), w (Cout, Cin)."""
    return np.matmul(w, x)


def pwconv_backward(dout, x, w):
    dw = np.tensordot(dout, x, axes=([0, 2], [0, 2]))
    return np.matmul(w.T, dout), dw


def dwsep_forward(x, dw, pw):
    y, xp = dwconv_forward(x, dw)
    return pwconv_forward(y, pw), (xp, y)


def dwsep_backward(dout, cache, dw, pw):
    xp, y = cache
    dy, dpw = pwconv_backward(dout, y, pw)
    dx, ddw = dwconv_backward(dy, xp, dw)
    return dx, ddw, dpw


# --- normalization and pointwise ---------------------------------------------


def bn_forward(x, gamma, beta, running_mean, running_var, mask=None, train=False):
    """Masked batch norm over (batch, frames) per channel.

    Accepts (B, C, T) with a (B, 1, T) mask, or (B, C) vectors. In train mode
    returns batch statistics in the cache for the caller's running update.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    m = np.ones((x.shape[0], 1, x.shape[2])) if mask is None else mask
    if train:
        n = m.sum()
        mean = (x * m).sum(axis=(0, 2)) / n
        var = (((x - mean[:, None]) * m) ** 2).sum(axis=(0, 2)) / n
    else:
        n = None
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None]) * inv[:, None] * m
    y = (gamma[:, None] * xhat + beta[:, None]) * m
    cache = (xhat, inv, m, n, squeeze, train, mean, var)
    return (y[:, :, 0] if squeeze else y), cache


def bn_backward(dy, cache, gamma):
    xhat, inv, m, n, squeeze, train, _, _ = cache
    if squeeze:
        dy = dy[:, :, None]
    dy = dy * m
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[:, None]
    if train:
        s1 = dxhat.sum(axis=(0, 2))[:, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2))[:, None]
        dx = (inv[:, None] / n) * (n * dxhat - s1 - xhat * s2) * m
    else:
        dx = dxhat * inv[:, None]
    return (dx[:, :, 0] if squeeze else dx), dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def dropout_mask(shape, p: float, rng: np.random.Generator):
    if p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# --- squeeze-and-excitation --------------------------------------------------


def window_counts(T: int, window: int) -> np.ndarray:
    return np.minimum(np.arange(1, T + 1), window).astype(np.float64)


def se_context(x, mask, window):
    """Per-channel context mean: (B, C) for global, (B, C, T) trailing window."""
    if window is None:
        return (x * mask).sum(axis=2) / mask.sum(axis=2)
    T = x.shape[2]
    cs = np.concatenate([np.zeros(x.shape[:2] + (1,)), np.cumsum(x * mask, axis=2)], axis=2)
    lo = np.maximum(np.arange(T) + 1 - window, 0)
    return (cs[:, :, 1:] - cs[:, :, lo]) / window_counts(T, window)


def se_gate(s, w1, b1, w2, b2):
    """Two-layer gate on context ``s`` of shape (B, C) or (B, C, T)."""
    if s.ndim == 2:
        z = s @ w1.T + b1
        g = expit(np.maximum(z, 0.0) @ w2.T + b2)
    else:
        z = np.matmul(w1, s) + b1[:, None]
        g = expit(np.matmul(w2, np.maximum(z, 0.0)) + b2[:, None])
    return z, g


def se_forward(x, mask, w1, b1, w2, b2, window=None):
    s = se_context(x, mask, window)
    z, g = se_gate(s, w1, b1, w2, b2)
    gx = g[:, :, None] if window is None else g
    return x * gx, (x, mask, s, z, g, window)


def se_backward(dout, cache, w1, w2):
    x, mask, s, z, g, window = cache
    a = np.maximum(z, 0.0)
    if window is None:
        dx = dout * g[:, :, None]
        dg = (dout * x).sum(axis=2)
        dpre = dg * g * (1 - g)
        dw2 = dpre.T @ a
        db2 = dpre.sum(axis=0)
        dz = (dpre @ w2) * (z > 0)
        dw1 = dz.T @ s
        db1 = dz.sum(axis=0)
        ds = dz @ w1
        dx += ds[:, :, None] * mask / mask.sum(axis=2)[:, :, None]
    else:
        dx = dout * g
        dpre = dout * x * g * (1 - g)
        dw2 = np.tensordot(dpre, a, axes=([0, 2], [0, 2]))
        db2 = dpre.sum(axis=(0, 2))
        dz = np.matmul(w2.T, dpre) * (z > 0)
        dw1 = np.tensordot(dz, s, axes=([0, 2], [0, 2]))
        db1 = dz.sum(axis=(0, 2))
        ds = np.matmul(w1.T, dz)
        T = x.shape[2]
        dnum = ds / window_counts(T, window)
        # dx[tau] = sum_{t = tau}^{tau + W - 1} dnum[t]
        rc = np.concatenate([np.cumsum(dnum[:, :, ::-1], axis=2)[:, :, ::-1],
                             np.zeros(x.shape[:2] + (1,))], axis=2)
        hi = np.minimum(np.arange(T) + window, T)
        dx += (rc[:, :, :T] - rc[:, :, hi]) * mask
    return dx, dw1, db1, dw2, db2


# --- attentive temporal pooling ----------------------------------------------


def attention_scores(h, W, b, v):
    a = np.tanh(np.matmul(W, h) + b[:, None])
    return a, np.matmul(v, a)


def masked_softmax(e, mask2d):
    e = np.where(mask2d > 0, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    w = np.exp(e) * mask2d
    return w / w.sum(axis=1, keepdims=True)


def attn_pool_forward(h, mask, W, b, v, eps=POOL_EPS):
    """Attention-weighted mean and std over valid frames -> (B, 2C)."""
    m2d = mask[:, 0, :]
    if np.any(m2d.sum(axis=1) == 0):
        raise ValueError("attentive pooling over an utterance with no valid frames")
    a, e = attention_scores(h, W, b, v)
    alpha = masked_softmax(e, m2d)
    mu = np.einsum("bt,bct->bc", alpha, h)
    var = np.einsum("bt,bct->bc", alpha, h * h) - mu**2
    sigma = np.sqrt(np.maximum(var, 0.0) + eps)
    return np.concatenate([mu, sigma], axis=1), (h, a, alpha, mu, var, sigma)


def attn_pool_backward(dout, cache, W, v):
    h, a, alpha, mu, var, sigma = cache
    C = h.shape[1]
    dmu, dsig = dout[:, :C], dout[:, C:]
    dvar = dsig / (2 * sigma) * (var > 0)
    dmu = dmu - 2 * mu * dvar
    dalpha = np.einsum("bc,bct->bt", dmu, h) + np.einsum("bc,bct->bt", dvar, h * h)
    dh = alpha[:, None, :] * (dmu[:, :, None] + 2 * dvar[:, :, None] * h)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dv = np.einsum("bt,bat->a", de, a)
    dpre = v[None, :, None] * de[:, None, :] * (1 - a * a)
    dW = np.tensordot(dpre, h, axes=([0, 2], [0, 2]))
    db = dpre.sum(axis=(0, 2))
    dh += np.matmul(W.T, dpre)
    return dh, dW, db, dv


# --- dense layers ------------------------------------------------------------


def linear_forward(x, W, b=None):
    y = x @ W.T
    return y if b is None else y + b


def linear_backward(dy, x, W):
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def l2_normalize(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / n, n


def l2_normalize_backward(dout, unit, norm):
    return (dout - unit * (dout * unit).sum(axis=-1, keepdims=True)) / norm


def cosine_forward(e, W, scale):
    u, un = l2_normalize(e)
    V, vn = l2_normalize(W)
    return scale * u @ V.T, (u, un, V, vn, scale)


def cosine_backward(dy, cache):
    u, un, V, vn, scale = cache
    du = scale * dy @ V
    dV = scale * dy.T @ u
    return l2_normalize_backward(du, u, un), l2_normalize_backward(dV, V, vn)
