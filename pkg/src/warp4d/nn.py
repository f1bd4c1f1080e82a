"""Small numpy layers with hand-written backward passes.

Arrays are channels-last. Every ``*_backward`` takes the upstream gradient
and whatever the forward pass needs, and returns gradients in the order of
the forward arguments.
"""

import numpy as np

from .errors import DimensionError


def linear(x, W, b=None):
    y = x @ W
    return y if b is None else y + b


def linear_backward(dy, x, W):
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * sigmoid(x)


def silu_backward(dy, x):
    s = sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


def layernorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layernorm_backward(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def conv2d(x, W, b):
    """Same-padded (zero) stride-1 convolution. x: (B,H,W,Ci), W: (k,k,Ci,Co)."""
    k = W.shape[0]
    r = k // 2
    B, H, Wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    y = np.zeros((B, H, Wd, W.shape[3]))
    for dy in range(k):
        for dx in range(k):
            y += xp[:, dy:dy + H, dx:dx + Wd, :] @ W[dy, dx]
    return y + b


def conv2d_backward(dout, x, W):
    k = W.shape[0]
    r = k // 2
    B, H, Wd, Ci = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    d2 = dout.reshape(-1, dout.shape[-1])
    for dy in range(k):
        for dx in range(k):
            xs = xp[:, dy:dy + H, dx:dx + Wd, :]
            dW[dy, dx] = xs.reshape(-1, Ci).T @ d2
            dxp[:, dy:dy + H, dx:dx + Wd, :] += dout @ W[dy, dx].T
    return dxp[:, r:r + H, r:r + Wd, :], dW, d2.sum(axis=0)


def patchify(x, p):
    """(B,H,W,C) -> (B, H/p * W/p, p*p*C), row-major patches."""
    B, H, W, C = x.shape
    if H % p or W % p:
        raise DimensionError(f"grid {H}x{W} not divisible by patch size {p}")
    x = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(tokens, p, hw, C):
    H, W = hw
    B = tokens.shape[0]
    x = tokens.reshape(B, H // p, W // p, p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def area_pool(x, f, axes=(-3, -2)):
    """Average over non-overlapping f x f blocks of a channels-last array."""
    if f == 1:
        return np.asarray(x, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    ha, wa = (a % x.ndim for a in axes)
    H, W = x.shape[ha], x.shape[wa]
    if H % f or W % f:
        raise DimensionError(f"size {H}x{W} not divisible by pooling factor {f}")
    shape = x.shape[:ha] + (H // f, f, W // f, f) + x.shape[wa + 1:]
    return x.reshape(shape).mean(axis=(ha + 1, ha + 3))


def area_resize(m, hw):
    """Area-average a 2-D (H, W) map down to ``hw`` (integer factor)."""
    m = np.asarray(m, dtype=np.float64)
    H, W = m.shape
    h, w = hw
    if H % h or W % w or H // h != W // w:
        raise DimensionError(f"cannot area-resize {H}x{W} to {h}x{w}")
    return area_pool(m[..., None], H // h)[..., 0]


def bilinear_resize(m, hw):
    """Half-pixel-centre bilinear resampling of a 2-D map (no antialiasing)."""
    m = np.asarray(m, dtype=np.float64)
    H, W = m.shape
    h, w = hw

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        i0 = np.minimum(np.floor(c).astype(int), max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    r0, r1, fr = coords(H, h)
    c0, c1, fc = coords(W, w)
    top = m[r0][:, c0] * (1 - fc) + m[r0][:, c1] * fc
    bot = m[r1][:, c0] * (1 - fc) + m[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def sinusoidal_embedding(t, dim, max_period=1000.0):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * 1000.0 * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def position_encoding_2d(gh, gw, dim):
    """Fixed sin-cos features for a gh x gw token grid, (gh*gw, dim)."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows, cols = np.mgrid[0:gh, 0:gw]
    r = rows.reshape(-1, 1) * freqs
    c = cols.reshape(-1, 1) * freqs
    pe = np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
    out = np.zeros((gh * gw, dim))
    out[:, :pe.shape[1]] = pe
    return out
