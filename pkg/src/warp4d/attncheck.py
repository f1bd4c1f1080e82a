"""Oracle suite for the dual-path attention, compared against plain-Python loops."""

from __future__ import annotations

import math

import numpy as np

from .attention import AttentionInputs, attention_weights, boost_bias, global_attention, guided_attention
from .rng import stream

TOL = 1e-6
LIMIT_TOL = 1e-3
LIMIT_LAMBDA = 1e4


def naive_attention(Q, K, V, bias=None):
    """Two-loop softmax attention written without numpy reductions."""
    d = len(Q[0])
    out = []
    for i, q in enumerate(Q):
        s = [sum(q[k] * key[k] for k in range(d)) / math.sqrt(d) for key in K]
        if bias is not None:
            s = [sj + bias[i][j] for j, sj in enumerate(s)]
        m = max(s)
        e = [math.exp(sj - m) for sj in s]
        z = sum(e)
        out.append([sum(e[j] / z * V[j][c] for j in range(len(K))) for c in range(len(V[0]))])
    return np.array(out)


def random_instance(rng):
    lq, lk, d, dv = (int(v) for v in rng.integers(1, 9, 4))
    scale = rng.uniform(0.1, 3.0)
    Q = rng.standard_normal((lq, d)) * scale
    K = rng.standard_normal((lk, d)) * scale
    V = rng.standard_normal((lk, dv))
    mask = (rng.uniform(size=lk) < 0.5).astype(float)
    return Q, K, V, mask


def run(n_instances=1000, seed=0):
    """Worst deviation for each oracle, as ``{name: (deviation, tolerance)}``."""
    rng = stream(seed, "attn-check")
    dev = {"global_vs_naive": 0.0, "guided_vs_naive": 0.0, "row_sum": 0.0, "shift_invariance": 0.0,
           "restricted_limit": 0.0}
    for _ in range(n_instances):
        Q, K, V, mask = random_instance(rng)
        lam = rng.uniform(0.0, 5.0)
        inp = AttentionInputs(Q, K, V)
        bias = boost_bias(mask, lam, len(Q))
        dense = bias.b.tolist()
        dev["global_vs_naive"] = max(dev["global_vs_naive"], np.abs(global_attention(inp) - naive_attention(Q, K, V)).max())
        dev["guided_vs_naive"] = max(dev["guided_vs_naive"],
                                     np.abs(guided_attention(inp, bias) - naive_attention(Q, K, V, dense)).max())
        for w in (attention_weights(inp), attention_weights(inp, bias)):
            dev["row_sum"] = max(dev["row_sum"], np.abs(w.sum(axis=-1) - 1.0).max())
        const = np.full((len(Q), len(K)), rng.uniform(-50, 50))
        dev["shift_invariance"] = max(dev["shift_invariance"],
                                      np.abs(guided_attention(inp, const) - global_attention(inp)).max())
        if mask.any():
            sel = mask.astype(bool)
            limit = guided_attention(inp, boost_bias(mask, LIMIT_LAMBDA, len(Q)))
            restricted = naive_attention(Q, K[sel], V[sel])
            dev["restricted_limit"] = max(dev["restricted_limit"], np.abs(limit - restricted).max())
    tol = {k: TOL for k in dev}
    tol["restricted_limit"] = LIMIT_TOL
    return {k: (float(v), tol[k]) for k, v in dev.items()}
