"""Dual-path scaled dot-product attention with a foreground boost bias.

The global path is plain softmax attention. The guided path adds ``lambda``
to the logit of every key token inside the interaction mask. The two
outputs are blended with a weight ``alpha`` that ramps up during training.

All functions accept optional leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .nn import softmax


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        Q, K, V = (np.asarray(a, dtype=np.float64) for a in (self.Q, self.K, self.V))
        if Q.ndim < 2 or K.ndim < 2 or V.ndim < 2:
            raise DimensionError("Q, K, V must be at least 2-D")
        if Q.shape[-1] != K.shape[-1] or Q.shape[-1] == 0:
            raise DimensionError(f"Q {Q.shape} and K {K.shape} disagree on the feature dimension")
        if K.shape[-2] != V.shape[-2]:
            raise DimensionError(f"K {K.shape} and V {V.shape} disagree on the number of keys")
        if Q.shape[-2] == 0 or K.shape[-2] == 0:
            raise DimensionError("need at least one query and one key")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)


@dataclass(frozen=True, eq=False)
class BoostBias:
    """Column-constant bias: ``b[i, j] = lam * key_fg[j]``, stored compactly."""

    lam: float
    key_fg: np.ndarray
    n_queries: int = 1

    @property
    def b(self):
        row = self.lam * np.asarray(self.key_fg, dtype=np.float64)
        return np.broadcast_to(row[..., None, :], row.shape[:-1] + (self.n_queries, row.shape[-1])).copy()


@dataclass(frozen=True)
class FusionSchedule:
    alpha_max: float = 1.0
    ramp_steps: int = 1000

    def __post_init__(self):
        if not 0 <= self.alpha_max <= 1:
            raise DomainError(f"alpha_max must lie in [0, 1], got {self.alpha_max!r}")
        if self.ramp_steps < 1:
            raise DomainError("ramp_steps must be at least 1")


def _inputs(inp):
    if not isinstance(inp, AttentionInputs):
        inp = AttentionInputs(*inp)
    return inp


def logits(inp):
    inp = _inputs(inp)
    return inp.Q @ np.swapaxes(inp.K, -1, -2) / np.sqrt(inp.Q.shape[-1])


def attention_weights(inp, bias=None):
    s = logits(inp)
    if bias is not None:
        b = bias.b if isinstance(bias, BoostBias) else np.asarray(bias, dtype=np.float64)
        if b.shape[-2:] != s.shape[-2:]:
            raise DimensionError(f"bias {b.shape} does not match logits {s.shape}")
        s = s + b
    return softmax(s)


def global_attention(inp):
    inp = _inputs(inp)
    return attention_weights(inp) @ inp.V


def boost_bias(mask, lam, n_queries=1):
    if lam < 0:
        raise DomainError(f"boost strength must be non-negative, got {lam!r}")
    m = np.asarray(mask)
    if np.any((m != 0) & (m != 1)):
        raise DomainError("mask must be binary")
    return BoostBias(float(lam), m.astype(np.float64), int(n_queries))


def guided_attention(inp, bias):
    inp = _inputs(inp)
    return attention_weights(inp, bias) @ inp.V


def fuse(o_global, o_guided, alpha):
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha!r}")
    o_global = np.asarray(o_global, dtype=np.float64)
    o_guided = np.asarray(o_guided, dtype=np.float64)
    if o_global.shape != o_guided.shape:
        raise DimensionError(f"path outputs differ in shape: {o_global.shape} vs {o_guided.shape}")
    return (1.0 - alpha) * o_global + alpha * o_guided


def alpha_schedule(step, sched: FusionSchedule):
    if step < 0:
        raise DomainError("step must be non-negative")
    return min(step / sched.ramp_steps, 1.0) * sched.alpha_max


def interaction_attention(inp, mask, lam, alpha):
    """Fused output of both paths for one set of Q/K/V."""
    inp = _inputs(inp)
    bias = boost_bias(mask, lam, inp.Q.shape[-2])
    return fuse(global_attention(inp), guided_attention(inp, bias), alpha)


def dual_attention_forward(Q, K, V, key_fg=None, lam=0.0, alpha=0.0):
    """Batched fused attention ``(1-a) softmax(S) V + a softmax(S + lam*fg) V``.

    ``Q`` (..., Lq, d), ``K`` (..., Lk, d), ``V`` (..., Lk, dv), ``key_fg``
    (..., Lk). Returns ``(out, cache)`` for :func:`dual_attention_backward`.
    """
    scale = 1.0 / np.sqrt(Q.shape[-1])
    s = (Q @ np.swapaxes(K, -1, -2)) * scale
    p_glob = softmax(s)
    p_guid = None
    if alpha != 0.0:
        bias = 0.0 if key_fg is None else lam * np.asarray(key_fg, dtype=np.float64)[..., None, :]
        p_guid = softmax(s + bias)
        weights = (1.0 - alpha) * p_glob + alpha * p_guid
    else:
        weights = p_glob
    return weights @ V, (Q, K, V, p_glob, p_guid, weights, alpha, scale)


def dual_attention_backward(dout, cache):
    """Returns ``(dQ, dK, dV)``."""
    Q, K, V, p_glob, p_guid, weights, alpha, scale = cache
    dV = np.swapaxes(weights, -1, -2) @ dout
    dW = dout @ np.swapaxes(V, -1, -2)
    if p_guid is None:
        ds = p_glob * (dW - (dW * p_glob).sum(axis=-1, keepdims=True))
    else:
        dg, db = (1.0 - alpha) * dW, alpha * dW
        ds = (p_glob * (dg - (dg * p_glob).sum(axis=-1, keepdims=True))
              + p_guid * (db - (db * p_guid).sum(axis=-1, keepdims=True)))
    ds *= scale
    return ds @ K, np.swapaxes(ds, -1, -2) @ Q, dV
