"""Confidence-modulated flow-matching path and Euler sampler.

The data weight at each site is ``Sigma_t = [s_low + c * (s_high - s_low)] * t``
and the flow state is ``(1 - Sigma_t) * x0 + Sigma_t * x1``. With ``c = 0``
and ``s_low = 1`` this is the plain rectified-flow path.

Two velocity targets are offered: ``"plain"`` regresses ``x1 - x0``;
``"schedule_consistent"`` regresses the exact time derivative of the
modulated path, ``[s_low + c * (s_high - s_low)] * (x1 - x0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScheduleError, DimensionError, DomainError, ValidationError

VELOCITY_MODES = ("plain", "schedule_consistent")


@dataclass(frozen=True)
class NoiseScheduleConfig:
    sigma_low: float = 1.0
    sigma_high: float = 0.85
    velocity_mode: str = "plain"

    def __post_init__(self):
        for name in ("sigma_low", "sigma_high"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must lie in (0, 1], got {v!r}")
        if self.velocity_mode not in VELOCITY_MODES:
            raise ValidationError(f"velocity_mode must be one of {VELOCITY_MODES}, got {self.velocity_mode!r}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"sigma_low", "sigma_high", "velocity_mode"}
        if unknown:
            raise ValidationError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FlowState:
    x_t: np.ndarray
    t: float
    sigma_t: np.ndarray
    v_target: np.ndarray


def _expand(c, like):
    """Broadcast a (…, H, W) confidence map against (…, H, W, C) data."""
    c = np.asarray(c, dtype=np.float64)
    like = np.asarray(like)
    if c.ndim == like.ndim - 1:
        c = c[..., None]
    return c


def site_rate(c, cfg: NoiseScheduleConfig):
    """``s_low + c * (s_high - s_low)``: the per-site slope of Sigma_t in t."""
    return cfg.sigma_low + np.asarray(c, dtype=np.float64) * (cfg.sigma_high - cfg.sigma_low)


def sigma_map(c, t, cfg: NoiseScheduleConfig):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
        raise DomainError(f"t must lie in [0, 1], got {t!r}")
    rate = site_rate(c, cfg)
    if t_arr.ndim:
        # per-sample t: align with the leading batch axis
        t_arr = t_arr.reshape(t_arr.shape + (1,) * (rate.ndim - t_arr.ndim))
    return rate * t_arr


def flow_state(x0, x1, sigma_t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    s = _expand(sigma_t, x0)
    return (1.0 - s) * x0 + s * x1


def velocity_target(x0, x1, c=None, cfg: NoiseScheduleConfig = None, mode=None):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    cfg = cfg or NoiseScheduleConfig()
    mode = mode or cfg.velocity_mode
    if mode == "plain":
        return x1 - x0
    if mode == "schedule_consistent":
        return _expand(site_rate(c, cfg), x0) * (x1 - x0)
    raise DomainError(f"unknown velocity mode {mode!r}")


def make_flow_state(x0, x1, c, t, cfg: NoiseScheduleConfig, mode=None):
    sigma_t = sigma_map(c, t, cfg)
    return FlowState(flow_state(x0, x1, sigma_t), t, sigma_t, velocity_target(x0, x1, c, cfg, mode))


def demix(x_end, x0, c, cfg: NoiseScheduleConfig):
    """Remove the residual noise weight left at t = 1 by a modulated path."""
    s1 = _expand(sigma_map(c, 1.0, cfg), x_end)
    if np.any(s1 == 0):
        raise DegenerateScheduleError("Sigma_1 is zero at some site; cannot de-mix")
    s1 = np.broadcast_to(s1, np.shape(x_end))
    out = np.array(x_end, dtype=np.float64)
    part = s1 < 1.0
    if np.any(part):
        x0b = np.broadcast_to(np.asarray(x0, dtype=np.float64), out.shape)
        out[part] = (out[part] - (1.0 - s1[part]) * x0b[part]) / s1[part]
    return out


def sample_ode(v_field, x0, c, cfg: NoiseScheduleConfig = None, n_steps=20, mode=None):
    """Explicit Euler from t = 0 to t = 1 of ``dx/dt = v_field(x, t, c)``.

    In ``schedule_consistent`` mode the end state is de-mixed per site.
    """
    if n_steps < 1:
        raise DomainError("n_steps must be at least 1")
    cfg = cfg or NoiseScheduleConfig()
    mode = mode or cfg.velocity_mode
    x0 = np.asarray(x0, dtype=np.float64)
    x = x0.copy()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * np.asarray(v_field(x, k * dt, c))
    if mode == "schedule_consistent":
        x = demix(x, x0, c, cfg)
    return x
