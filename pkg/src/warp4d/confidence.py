"""Confidence maps for warped priors.

Two producers: a trainable-free blur of the occupancy mask, and a small
two-layer convolutional estimator over (warped features, mask) ending in a
sigmoid. The estimator is supervised by ``aux_loss``, whose two weights are
free scalars passed through softplus.

Maps are single-channel, at the latent grid resolution.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import DimensionError, DomainError
from .rng import stream

PYRAMID_LEVELS = 3
# sigmoid(+-30) stays strictly inside (0, 1) in float64
LOGIT_CLAMP = 30.0


def box_blur(m, radius):
    """Mean over a (2r+1)^2 window with edge replication."""
    m = np.asarray(m, dtype=np.float64)
    if radius == 0:
        return m.copy()
    H, W = m.shape
    p = np.pad(m, radius, mode="edge")
    acc = np.zeros((H, W))
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            acc += p[dy:dy + H, dx:dx + W]
    return acc / (2 * radius + 1) ** 2


def heuristic_confidence(m_geo, blur_radius=0, grid=None):
    """Blurred occupancy mask, area-averaged to ``grid`` (defaults to input size)."""
    if blur_radius < 0:
        raise DomainError("blur_radius must be non-negative")
    m = np.asarray(m_geo, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    c = box_blur(m, int(blur_radius))
    if grid is not None and tuple(grid) != c.shape:
        c = nn.area_resize(c, grid)
    return np.clip(c, 0.0, 1.0)


class FeatureEncoder:
    """Frozen linear encoder: 3-level average-pool pyramid then a random channel mix.

    Each pyramid level is block-averaged by 2**level and replicated back to
    full resolution, so the pyramid map has operator norm sqrt(levels) and the
    whole encoder is bounded by ``sqrt(levels) * ||P||_2``.
    """

    def __init__(self, n_features=8, in_channels=3, levels=PYRAMID_LEVELS, seed=0):
        self.levels = levels
        self.in_channels = in_channels
        rng = stream(seed, "feature-encoder")
        self.projection = rng.standard_normal((levels * in_channels, n_features)) / np.sqrt(levels * in_channels)

    @property
    def n_features(self):
        return self.projection.shape[1]

    def pyramid(self, x):
        x = np.asarray(x, dtype=np.float64)
        H, W = x.shape[-3], x.shape[-2]
        f = 2 ** (self.levels - 1)
        if H % f or W % f:
            raise DimensionError(f"encoder input {H}x{W} must be divisible by {f}")
        out = [x]
        for lvl in range(1, self.levels):
            k = 2 ** lvl
            pooled = nn.area_pool(x, k)
            out.append(np.repeat(np.repeat(pooled, k, axis=-3), k, axis=-2))
        return np.concatenate(out, axis=-1)

    def __call__(self, x):
        return self.pyramid(x) @ self.projection

    def operator_norm_bound(self):
        return np.sqrt(self.levels) * np.linalg.norm(self.projection, 2)


_DEFAULT_ENCODER = None


def default_encoder():
    global _DEFAULT_ENCODER
    if _DEFAULT_ENCODER is None:
        _DEFAULT_ENCODER = FeatureEncoder()
    return _DEFAULT_ENCODER


def encode_features(x, encoder=None):
    return (encoder or default_encoder())(x)


def latent_features(x, factor, encoder=None):
    """Encoder features area-pooled to the latent grid."""
    return nn.area_pool(encode_features(x, encoder), factor)


def feature_discrepancy(x_gt, x_warp, factor, encoder=None):
    """``|E(x_gt) - E(x_warp)|`` averaged over channels, then area-pooled."""
    enc = encoder or default_encoder()
    d = np.abs(enc(x_gt) - enc(x_warp)).mean(axis=-1)
    return nn.area_pool(d[..., None], factor)[..., 0]


def inverse_softplus(y):
    return float(np.log(np.expm1(y)))


class EstimatorParams:
    """Weights of the confidence estimator plus the two loss-weight scalars."""

    names = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "lam1", "lam2")

    def __init__(self, tensors):
        missing = set(self.names) - set(tensors)
        if missing:
            raise DimensionError(f"estimator params missing {sorted(missing)}")
        self.tensors = {k: np.asarray(tensors[k], dtype=np.float64) for k in self.names}

    @classmethod
    def init(cls, n_features, hidden=8, seed=0, zero_final=False, aux_weight=1.0, kernel=3):
        rng = stream(seed, "estimator-init")
        cin = n_features + 1
        w1 = rng.standard_normal((kernel, kernel, cin, hidden)) / np.sqrt(kernel * kernel * cin)
        w2 = rng.standard_normal((kernel, kernel, hidden, 1)) / np.sqrt(kernel * kernel * hidden)
        if zero_final:
            w2[:] = 0.0
        lam = np.array(inverse_softplus(aux_weight))
        return cls({"conv1.w": w1, "conv1.b": np.zeros(hidden), "conv2.w": w2, "conv2.b": np.zeros(1),
                    "lam1": lam.copy(), "lam2": lam.copy()})

    @property
    def n_features(self):
        return self.tensors["conv1.w"].shape[2] - 1

    @property
    def weights(self):
        return float(nn.softplus(self.tensors["lam1"])), float(nn.softplus(self.tensors["lam2"]))

    def __getitem__(self, k):
        return self.tensors[k]

    def copy(self):
        return EstimatorParams({k: v.copy() for k, v in self.tensors.items()})


def _batched(z_warp, m):
    z = np.asarray(z_warp, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    single = z.ndim == 3
    if single:
        z, m = z[None], m[None]
    if z.ndim != 4 or m.shape != z.shape[:3]:
        raise DimensionError(f"features {np.shape(z_warp)} and mask {np.shape(m)} are not spatially compatible")
    return z, m, single


def estimator_forward(z_warp, m_geo, params: EstimatorParams):
    z, m, single = _batched(z_warp, m_geo)
    if z.shape[-1] != params.n_features:
        raise DimensionError(f"estimator expects {params.n_features} feature channels, got {z.shape[-1]}")
    x = np.concatenate([z, m[..., None]], axis=-1)
    h_pre = nn.conv2d(x, params["conv1.w"], params["conv1.b"])
    h = nn.silu(h_pre)
    logit = nn.conv2d(h, params["conv2.w"], params["conv2.b"])[..., 0]
    inside = np.abs(logit) < LOGIT_CLAMP
    c = nn.sigmoid(np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP))
    cache = (x, h_pre, h, c, inside, single)
    return (c[0] if single else c), cache


def estimator_backward(dc, cache, params: EstimatorParams):
    """Returns ``(param_grads, d_z_warp, d_m_geo)``."""
    x, h_pre, h, c, inside, single = cache
    dc = np.asarray(dc, dtype=np.float64)
    if single:
        dc = dc[None]
    dlogit = (dc * c * (1.0 - c) * inside)[..., None]
    dh, dw2, db2 = nn.conv2d_backward(dlogit, h, params["conv2.w"])
    dh_pre = nn.silu_backward(dh, h_pre)
    dx, dw1, db1 = nn.conv2d_backward(dh_pre, x, params["conv1.w"])
    grads = {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2,
             "lam1": np.zeros(()), "lam2": np.zeros(())}
    dz, dm = dx[..., :-1], dx[..., -1]
    if single:
        dz, dm = dz[0], dm[0]
    return grads, dz, dm


def estimate_confidence(z_warp, m_geo, params: EstimatorParams):
    """Confidence in (0, 1) at the spatial grid of ``z_warp``."""
    return estimator_forward(z_warp, m_geo, params)[0]


def aux_loss(c, m_geo, x_gt, x_warp, params: EstimatorParams, encoder=None):
    """Auxiliary confidence loss and its gradients.

    ``c`` is (H', W') or (B, H', W'); ``m_geo`` and the frames are at pixel
    resolution, an integer multiple of the grid. Squared norms are summed
    over sites and averaged over the batch.

    Returns ``(loss, grads, parts)`` with ``grads`` holding ``"c"``,
    ``"lam1"``, ``"lam2"`` and ``parts`` the two unweighted residual norms.
    """
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 2
    m = np.asarray(m_geo, dtype=np.float64)
    xg = np.asarray(x_gt, dtype=np.float64)
    xw = np.asarray(x_warp, dtype=np.float64)
    if single:
        c, m, xg, xw = c[None], m[None], xg[None], xw[None]
    if m.shape[0] != c.shape[0] or xg.shape != xw.shape or xg.shape[:3] != m.shape:
        raise DimensionError("aux_loss inputs have inconsistent shapes")
    B, h, w = c.shape
    H, W = m.shape[1:]
    if H % h or W % w or H // h != W // w:
        raise DimensionError(f"pixel size {H}x{W} is not an integer multiple of grid {h}x{w}")
    factor = H // h
    target_geo = np.stack([nn.bilinear_resize(mi, (h, w)) for mi in m])
    target_feat = feature_discrepancy(xg, xw, factor, encoder)
    r1 = c - target_geo
    r2 = c - target_feat
    n1 = (r1 * r1).reshape(B, -1).sum(axis=1).mean()
    n2 = (r2 * r2).reshape(B, -1).sum(axis=1).mean()
    l1, l2 = params.weights
    loss = l1 * n1 + l2 * n2
    dc = (2.0 / B) * (l1 * r1 + l2 * r2)
    grads = {
        "c": dc[0] if single else dc,
        "lam1": nn.sigmoid(np.atleast_1d(params["lam1"]))[0] * n1,
        "lam2": nn.sigmoid(np.atleast_1d(params["lam2"]))[0] * n2,
    }
    return float(loss), grads, (float(n1), float(n2))
