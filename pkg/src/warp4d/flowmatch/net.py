"""Toy-scale velocity network with interaction-aware attention blocks.

Query tokens come from patches of ``[x_t, c, cond]``; each block attends
jointly over its own tokens and the (optional) reference tokens, with the
boost bias on foreground reference tokens. Pre-LayerNorm residual layout:

    h += Attn(LN1(h), [LN1(h); r]);  h += FFN(LN2(h))
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import nn
from ..attention import dual_attention_backward, dual_attention_forward
from ..errors import DimensionError, ValidationError
from ..rng import stream


@dataclass
class NetConfig:
    grid: tuple = (1, 1)
    x_channels: int = 2
    cond_channels: int = 0
    ref_channels: int = 0
    patch: int = 1
    d_model: int = 64
    ffn_mult: int = 2
    n_blocks: int = 2
    t_dim: int = 32
    boost_lambda: float = 2.0
    pos_enc: bool = False

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        if self.grid[0] % self.patch or self.grid[1] % self.patch:
            raise ValidationError(f"grid {self.grid} not divisible by patch {self.patch}")

    @property
    def n_tokens(self):
        return (self.grid[0] // self.patch) * (self.grid[1] // self.patch)

    @property
    def token_grid(self):
        return self.grid[0] // self.patch, self.grid[1] // self.patch

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown net config keys: {sorted(unknown)}")
        return cls(**d)


def _block_names(i):
    p = f"blocks.{i}."
    return [p + n for n in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo",
                            "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


class VelocityNet:
    def __init__(self, cfg: NetConfig, params=None, seed=0):
        self.cfg = cfg
        self.params = self.init_params(cfg, seed) if params is None else dict(params)
        expected = self.init_params(cfg, 0)
        for k, v in expected.items():
            if k not in self.params or self.params[k].shape != v.shape:
                got = self.params[k].shape if k in self.params else None
                raise DimensionError(f"parameter {k}: expected shape {v.shape}, got {got}")
        self._pe = None
        if cfg.pos_enc:
            self._pe = nn.position_encoding_2d(*cfg.token_grid, cfg.d_model)

    @staticmethod
    def init_params(cfg: NetConfig, seed=0):
        rng = stream(seed, "velocity-init")
        d, p2 = cfg.d_model, cfg.patch ** 2

        def dense(fan_in, fan_out, scale=1.0):
            return rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))

        P = {}
        in_dim = p2 * (cfg.x_channels + 1 + cfg.cond_channels)
        P["embed.w"], P["embed.b"] = dense(in_dim, d), np.zeros(d)
        P["time.w"], P["time.b"] = dense(cfg.t_dim, d), np.zeros(d)
        if cfg.ref_channels:
            P["ref.w"], P["ref.b"] = dense(p2 * cfg.ref_channels, d), np.zeros(d)
        hidden = cfg.ffn_mult * d
        for i in range(cfg.n_blocks):
            pre = f"blocks.{i}."
            P[pre + "ln1.g"], P[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for n in ("wq", "wk", "wv"):
                P[pre + "attn." + n] = dense(d, d)
            P[pre + "attn.wo"], P[pre + "attn.bo"] = dense(d, d, 0.5), np.zeros(d)
            P[pre + "ln2.g"], P[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            P[pre + "ffn.w1"], P[pre + "ffn.b1"] = dense(d, hidden), np.zeros(hidden)
            P[pre + "ffn.w2"], P[pre + "ffn.b2"] = dense(hidden, d, 0.5), np.zeros(d)
        P["lnf.g"], P["lnf.b"] = np.ones(d), np.zeros(d)
        P["out.w"], P["out.b"] = dense(d, p2 * cfg.x_channels, 0.1), np.zeros(p2 * cfg.x_channels)
        return P

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def attention_param_names(self):
        return [k for k in self.params if ".attn." in k]

    def _tokens(self, x_t, c, cond):
        parts = [x_t, c[..., None]]
        if self.cfg.cond_channels:
            if cond is None or cond.shape[-1] != self.cfg.cond_channels:
                raise DimensionError(f"net expects {self.cfg.cond_channels} conditioning channels")
            parts.append(cond)
        return nn.patchify(np.concatenate(parts, axis=-1), self.cfg.patch)

    def forward(self, x_t, t, c, cond=None, ref=None, ref_fg=None, alpha=0.0):
        """Predicted velocity with the same shape as ``x_t`` (B, H, W, C)."""
        cfg, P = self.cfg, self.params
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 4 or x_t.shape[1:3] != cfg.grid or x_t.shape[3] != cfg.x_channels:
            raise DimensionError(f"x_t shape {x_t.shape} does not match grid {cfg.grid} x {cfg.x_channels}")
        B = x_t.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), x_t.shape[:3])
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        tok = self._tokens(x_t, c, cond)
        temb = nn.sinusoidal_embedding(t, cfg.t_dim)
        h = nn.linear(tok, P["embed.w"], P["embed.b"]) + nn.linear(temb, P["time.w"], P["time.b"])[:, None]
        if self._pe is not None:
            h = h + self._pe
        cache = {"tok": tok, "temb": temb, "B": B, "alpha": alpha}

        r = None
        key_fg = None
        if cfg.ref_channels:
            if ref is None:
                raise DimensionError("net expects reference frames")
            rtok = nn.patchify(np.asarray(ref, dtype=np.float64), cfg.patch)
            r = nn.linear(rtok, P["ref.w"], P["ref.b"])
            if self._pe is not None:
                r = r + self._pe
            cache["rtok"] = rtok
            fg = np.zeros((B, r.shape[1])) if ref_fg is None else np.asarray(ref_fg, dtype=np.float64)
            key_fg = np.concatenate([np.zeros((B, h.shape[1])), fg], axis=1)

        blocks = []
        for i in range(cfg.n_blocks):
            pre = f"blocks.{i}."
            a_in, ln1 = nn.layernorm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            kv = a_in if r is None else np.concatenate([a_in, r], axis=1)
            Q = a_in @ P[pre + "attn.wq"]
            K = kv @ P[pre + "attn.wk"]
            V = kv @ P[pre + "attn.wv"]
            o, att = dual_attention_forward(Q, K, V, key_fg, cfg.boost_lambda, alpha)
            h = h + nn.linear(o, P[pre + "attn.wo"], P[pre + "attn.bo"])
            f_in, ln2 = nn.layernorm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            u = nn.linear(f_in, P[pre + "ffn.w1"], P[pre + "ffn.b1"])
            act = nn.silu(u)
            h = h + nn.linear(act, P[pre + "ffn.w2"], P[pre + "ffn.b2"])
            blocks.append((a_in, ln1, kv, att, o, f_in, ln2, u, act))
        hf, lnf = nn.layernorm(h, P["lnf.g"], P["lnf.b"])
        out_tok = nn.linear(hf, P["out.w"], P["out.b"])
        cache.update(blocks=blocks, hf=hf, lnf=lnf, r=r)
        out = nn.unpatchify(out_tok, cfg.patch, cfg.grid, cfg.x_channels)
        return out, cache

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)[0]

    def backward(self, dout, cache):
        """Returns ``(grads, d_x_t, d_c)``."""
        cfg, P = self.cfg, self.params
        g = {k: np.zeros_like(v) for k, v in P.items()}
        d_tok_out = nn.patchify(dout, cfg.patch)
        dhf, g["out.w"], g["out.b"] = nn.linear_backward(d_tok_out, cache["hf"], P["out.w"])
        dh, g["lnf.g"], g["lnf.b"] = nn.layernorm_backward(dhf, cache["lnf"], P["lnf.g"])
        r = cache["r"]
        dr = None if r is None else np.zeros_like(r)
        n_q = dh.shape[1]
        for i in reversed(range(cfg.n_blocks)):
            pre = f"blocks.{i}."
            a_in, ln1, kv, att, o, f_in, ln2, u, act = cache["blocks"][i]
            dact, g[pre + "ffn.w2"], g[pre + "ffn.b2"] = nn.linear_backward(dh, act, P[pre + "ffn.w2"])
            du = nn.silu_backward(dact, u)
            df_in, g[pre + "ffn.w1"], g[pre + "ffn.b1"] = nn.linear_backward(du, f_in, P[pre + "ffn.w1"])
            dx, g[pre + "ln2.g"], g[pre + "ln2.b"] = nn.layernorm_backward(df_in, ln2, P[pre + "ln2.g"])
            dh = dh + dx
            do, g[pre + "attn.wo"], g[pre + "attn.bo"] = nn.linear_backward(dh, o, P[pre + "attn.wo"])
            dQ, dK, dV = dual_attention_backward(do, att)
            da_in, g[pre + "attn.wq"], _ = nn.linear_backward(dQ, a_in, P[pre + "attn.wq"])
            dkv_k, g[pre + "attn.wk"], _ = nn.linear_backward(dK, kv, P[pre + "attn.wk"])
            dkv_v, g[pre + "attn.wv"], _ = nn.linear_backward(dV, kv, P[pre + "attn.wv"])
            dkv = dkv_k + dkv_v
            da_in = da_in + dkv[:, :n_q]
            if dr is not None:
                dr += dkv[:, n_q:]
            dx, g[pre + "ln1.g"], g[pre + "ln1.b"] = nn.layernorm_backward(da_in, ln1, P[pre + "ln1.g"])
            dh = dh + dx
        if dr is not None:
            _, g["ref.w"], g["ref.b"] = nn.linear_backward(dr, cache["rtok"], P["ref.w"])
        dtok, g["embed.w"], g["embed.b"] = nn.linear_backward(dh, cache["tok"], P["embed.w"])
        _, g["time.w"], g["time.b"] = nn.linear_backward(dh.sum(axis=1), cache["temb"], P["time.w"])
        total_ch = cfg.x_channels + 1 + cfg.cond_channels
        dgrid = nn.unpatchify(dtok, cfg.patch, cfg.grid, total_ch)
        return g, dgrid[..., :cfg.x_channels], dgrid[..., cfg.x_channels]
