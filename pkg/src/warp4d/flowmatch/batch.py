"""Training batches: toy 2-D mixtures and warped two-view scenes.

Scene frames are mapped to the latent grid by ``factor x factor`` area
pooling and rescaled from [0, 1] to [-1, 1]. Each scene example carries the
target view, the warped source view with its occupancy mask, the source
view as reference tokens, and the source foreground mask at token level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import confidence, nn
from ..errors import DimensionError, ValidationError
from ..schedule import NoiseScheduleConfig, flow_state, sigma_map, velocity_target
from ..warp import depth_to_pointcloud, forward_warp, warp_frame


@dataclass(frozen=True)
class ToySpec:
    """Isotropic Gaussian mixture in 2-D."""

    means: tuple = ((-5.0, 0.0), (5.0, 0.0))
    std: float = 0.3
    weights: tuple = (0.3, 0.7)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.means) != len(w) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValidationError("mixture weights must be non-negative, sum to 1, and match the means")

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        x = np.asarray(self.means)[comp] + self.std * rng.standard_normal((n, 2))
        return x, comp

    def assign(self, x):
        """Index of the nearest mean for each row of ``x``."""
        d = ((np.asarray(x)[:, None, :] - np.asarray(self.means)[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


@dataclass(eq=False)
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    c: np.ndarray
    t: np.ndarray
    sigma_t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray
    x_warp: np.ndarray = None   # latent, [-1, 1]
    m_geo: np.ndarray = None    # pixel resolution
    fg_mask: np.ndarray = None  # token-level reference foreground
    ref: np.ndarray = None
    z_warp: np.ndarray = None
    m_lat: np.ndarray = None
    x_gt_pix: np.ndarray = None
    x_warp_pix: np.ndarray = None
    region: np.ndarray = None   # latent-grid evaluation region
    extras: dict = field(default_factory=dict)

    @property
    def is_scene(self):
        return self.x_warp is not None


def to_latent(frames, factor):
    return 2.0 * nn.area_pool(frames, factor) - 1.0


def from_latent(x):
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def round_trip_warp(rgb, depth, fg, cam_src, cam_mid):
    """Warp a frame to ``cam_mid`` and back, using the intermediate z-buffer.

    Returns ``(mid_frame, back_frame, mid_fg)``; ``back_frame`` is the
    hole-riddled prior for reconstructing the original frame.
    """
    hw = np.shape(depth)
    cloud = depth_to_pointcloud(rgb, depth, cam_src)
    mid = forward_warp(cloud, cam_mid, hw)
    fg_cloud = depth_to_pointcloud(np.repeat(fg[..., None].astype(np.float64), 3, -1), depth, cam_src)
    mid_fg = forward_warp(fg_cloud, cam_mid, hw).rgb[..., 0] > 0.5
    back = warp_frame(mid.rgb, np.where(mid.m_geo, mid.zbuf, 0.0), cam_mid, cam_src, hw)
    return mid, back, mid_fg


class SceneData:
    """Precomputed warps and latents for a list of :class:`SceneSample`.

    ``stage=1`` pairs are (source view A -> target view B).
    ``stage=2`` builds pseudo pairs from view A alone: A is warped to B and
    back, and the model must reconstruct A from the round-trip prior with the
    intermediate view as reference.
    """

    def __init__(self, samples, factor=2, patch=2, encoder=None, stage=1, both_directions=False):
        if not samples:
            raise ValidationError("no scene samples")
        self.factor = factor
        self.patch = patch
        self.encoder = encoder or confidence.default_encoder()
        ex = []
        for s in samples:
            dirs = [("a", "b")] + ([("b", "a")] if both_directions else [])
            for src, tgt in dirs:
                fs, ds, ms, cs = s.view(src)
                ft, _, mt, ct = s.view(tgt)
                for k in range(s.n_frames):
                    if stage == 1:
                        w = warp_frame(fs[k], ds[k], cs, ct)
                        ex.append(self._example(ft[k], mt[k], w.rgb, w.m_geo, fs[k], ms[k]))
                    else:
                        mid, back, mid_fg = round_trip_warp(fs[k], ds[k], ms[k], cs, ct)
                        ex.append(self._example(fs[k], ms[k], back.rgb, back.m_geo, mid.rgb, mid_fg))
        self.examples = ex
        H, W = ex[0]["x_gt_pix"].shape[:2]
        if H % factor or W % factor:
            raise DimensionError(f"frame size {H}x{W} not divisible by latent factor {factor}")
        self.grid = (H // factor, W // factor)
        self.stacked = {k: np.stack([e[k] for e in ex]) for k in ex[0]}

    def _example(self, target, target_fg, warped, m_geo, ref_rgb, ref_fg):
        f, p = self.factor, self.patch
        m = m_geo.astype(np.float64)
        grid = (m.shape[0] // f, m.shape[1] // f)
        holes = nn.area_pool((1.0 - m)[..., None], f)[..., 0] > 0
        tgt_fg = nn.area_pool(target_fg.astype(np.float64)[..., None], f)[..., 0] > 0
        ref_fg_lat = nn.area_pool(ref_fg.astype(np.float64)[..., None], f)
        return {
            "x1": to_latent(target, f),
            "x_warp": to_latent(warped, f),
            "m_geo": m,
            "m_lat": nn.bilinear_resize(m, grid),
            "z_warp": confidence.latent_features(warped, f, self.encoder),
            "ref": np.concatenate([to_latent(ref_rgb, f), 2.0 * ref_fg_lat - 1.0], axis=-1),
            "fg_tok": (nn.area_pool(ref_fg.astype(np.float64)[..., None], f * p)[..., 0] > 0).reshape(-1).astype(np.float64),
            "x_gt_pix": np.asarray(target, dtype=np.float64),
            "x_warp_pix": np.asarray(warped, dtype=np.float64),
            "region": holes | tgt_fg,
        }

    def __len__(self):
        return len(self.examples)

    def gather(self, idx):
        return {k: v[idx] for k, v in self.stacked.items()}


def compute_confidence(source, est, z_warp, m_lat, m_geo_pix=None, grid=None):
    """Confidence for a scene batch: ``"estimator"``, ``"heuristic"`` or ``"zero"``."""
    if source == "estimator":
        return confidence.estimate_confidence(z_warp, m_lat, est)
    if source == "heuristic":
        return np.stack([confidence.heuristic_confidence(m, 1, grid) for m in m_geo_pix])
    if source == "zero":
        return np.zeros(z_warp.shape[:3])
    raise ValidationError(f"unknown confidence source {source!r}")


def make_batch(source, batch_size, rng, sched: NoiseScheduleConfig = None, est=None,
               confidence_source="estimator", t=None):
    """Draw one :class:`FlowBatch` from a :class:`ToySpec` or :class:`SceneData`.

    Draw order (indices, x0, t) is fixed so equal rng states give equal bytes.
    """
    sched = sched or NoiseScheduleConfig()
    if isinstance(source, ToySpec):
        x1 = source.sample(rng, batch_size)[0].reshape(batch_size, 1, 1, 2)
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, batch_size) if t is None else np.broadcast_to(t, (batch_size,)).astype(float)
        c = np.zeros((batch_size, 1, 1))
        sigma_t = sigma_map(c, t, sched)
        return FlowBatch(x0, x1, c, t, sigma_t, flow_state(x0, x1, sigma_t), velocity_target(x0, x1, c, sched))

    if not isinstance(source, SceneData):
        raise ValidationError(f"cannot build a batch from {type(source).__name__}")
    idx = rng.integers(0, len(source), batch_size)
    d = source.gather(idx)
    x1 = d["x1"]
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0.0, 1.0, batch_size) if t is None else np.broadcast_to(t, (batch_size,)).astype(float)
    c = compute_confidence(confidence_source, est, d["z_warp"], d["m_lat"], d["m_geo"], source.grid)
    sigma_t = sigma_map(c, t, sched)
    return FlowBatch(
        x0, x1, c, t, sigma_t, flow_state(x0, x1, sigma_t), velocity_target(x0, x1, c, sched),
        x_warp=d["x_warp"], m_geo=d["m_geo"], fg_mask=d["fg_tok"], ref=d["ref"], z_warp=d["z_warp"],
        m_lat=d["m_lat"], x_gt_pix=d["x_gt_pix"], x_warp_pix=d["x_warp_pix"], region=d["region"],
        extras={"index": idx, "confidence_source": confidence_source},
    )
