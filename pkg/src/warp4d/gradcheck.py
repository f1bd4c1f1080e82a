"""Directional central finite-difference checks for every hand-written backward pass.

Each trainable tensor is perturbed along ``n_proj`` random unit directions
``u``; the analytic directional derivative ``<g, u>`` is compared with
``(f(p + eps u) - f(p - eps u)) / 2 eps``. The reported deviation is
``|fd - an| / max(|fd|, |an|, floor)``.
"""

from __future__ import annotations

import numpy as np

from . import confidence, nn
from .flowmatch.batch import FlowBatch, ToySpec, make_batch, to_latent
from .flowmatch.net import VelocityNet
from .flowmatch.train import loss, scene_net_config, toy_net_config
from .rng import stream
from .schedule import NoiseScheduleConfig, flow_state, sigma_map, velocity_target

NET_TOL = 1e-3
ESTIMATOR_TOL = 1e-4
EPS = 1e-5
FLOOR = 1e-8


def directional_check(fn, params, grads, n_proj=5, eps=EPS, seed=0, floor=FLOOR):
    """Worst relative deviation per tensor name; ``fn()`` reads ``params`` in place."""
    rng = stream(seed, "gradcheck")
    out = {}
    for name in sorted(params):
        p = params[name]
        worst = 0.0
        for _ in range(n_proj):
            d = rng.standard_normal(p.shape)
            d /= np.linalg.norm(d)
            old = p.copy()
            p[...] = old + eps * d
            lp = fn()
            p[...] = old - eps * d
            lm = fn()
            p[...] = old
            fd = (lp - lm) / (2 * eps)
            an = float(np.sum(grads[name] * d))
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
        out[name] = worst
    return out


def toy_net_suite(seed=0, n_proj=5):
    """VelocityNet on a 2-D toy batch through the flow-matching loss."""
    net = VelocityNet(toy_net_config(d_model=16, t_dim=8), seed=seed)
    batch = make_batch(ToySpec(), 16, stream(seed, "gradcheck-toy"))

    def f():
        return loss(net, None, batch, alpha=0.3).total

    res = loss(net, None, batch, alpha=0.3)
    return {"net." + k: v for k, v in directional_check(f, net.params, res.net_grads, n_proj, seed=seed).items()}


def _scene_batch(rng, grid=(4, 4), factor=2, n_features=8, B=2, encoder=None):
    h, w = grid
    H, W = h * factor, w * factor
    x_gt = rng.uniform(0, 1, (B, H, W, 3))
    m_geo = rng.uniform(size=(B, H, W)) > 0.3
    x_warp = np.where(m_geo[..., None], np.clip(x_gt + rng.normal(0, 0.1, x_gt.shape), 0, 1), 0.0)
    enc = encoder or confidence.FeatureEncoder(n_features)
    x1 = to_latent(x_gt, factor)
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0, 1, B)
    c = np.zeros((B, h, w))
    sched = NoiseScheduleConfig()
    sigma_t = sigma_map(c, t, sched)
    return FlowBatch(
        x0, x1, c, t, sigma_t, flow_state(x0, x1, sigma_t), velocity_target(x0, x1, c, sched),
        x_warp=to_latent(x_warp, factor), m_geo=m_geo.astype(np.float64),
        fg_mask=(rng.uniform(size=(B, (h // 2) * (w // 2))) > 0.5).astype(np.float64),
        ref=rng.uniform(-1, 1, (B, h, w, 4)), z_warp=confidence.latent_features(x_warp, factor, enc),
        m_lat=np.stack([nn.bilinear_resize(m, grid) for m in m_geo.astype(np.float64)]),
        x_gt_pix=x_gt, x_warp_pix=x_warp,
    ), enc


def scene_joint_suite(seed=0, n_proj=5, velocity_mode="plain"):
    """Net and estimator together through the joint loss on a tiny scene batch."""
    rng = stream(seed, "gradcheck-scene")
    batch, enc = _scene_batch(rng)
    net = VelocityNet(scene_net_config((4, 4), d_model=8, t_dim=8), seed=seed)
    est = confidence.EstimatorParams.init(enc.n_features, hidden=4, seed=seed, aux_weight=0.5)
    sched = NoiseScheduleConfig(velocity_mode=velocity_mode)

    def run():
        return loss(net, est, batch, sched, 0.4, "estimator", enc)

    res = run()
    out = {"net." + k: v for k, v in
           directional_check(lambda: run().total, net.params, res.net_grads, n_proj, seed=seed).items()}
    out.update({"est." + k: v for k, v in
                directional_check(lambda: run().total, est.tensors, res.est_grads, n_proj, seed=seed).items()})
    return out


def estimator_suite(seed=0, n_proj=5):
    """Standalone estimator: mean output and the auxiliary loss."""
    rng = stream(seed, "gradcheck-estimator")
    batch, enc = _scene_batch(rng, grid=(6, 6), B=3)
    est = confidence.EstimatorParams.init(enc.n_features, hidden=6, seed=seed, aux_weight=0.7)
    z, m = batch.z_warp, batch.m_lat

    c, cache = confidence.estimator_forward(z, m, est)
    g_mean, _, _ = confidence.estimator_backward(np.full(c.shape, 1.0 / c.size), cache, est)
    g_mean = {k: v for k, v in g_mean.items() if not k.startswith("lam")}
    conv = {k: est.tensors[k] for k in g_mean}
    out = {"mean." + k: v for k, v in directional_check(
        lambda: float(confidence.estimate_confidence(z, m, est).mean()), conv, g_mean, n_proj, seed=seed).items()}

    def aux():
        cc = confidence.estimate_confidence(z, m, est)
        return confidence.aux_loss(cc, batch.m_geo, batch.x_gt_pix, batch.x_warp_pix, est, enc)[0]

    c, cache = confidence.estimator_forward(z, m, est)
    _, ga, _ = confidence.aux_loss(c, batch.m_geo, batch.x_gt_pix, batch.x_warp_pix, est, enc)
    g_aux, _, _ = confidence.estimator_backward(ga["c"], cache, est)
    g_aux["lam1"], g_aux["lam2"] = np.asarray(ga["lam1"]), np.asarray(ga["lam2"])
    out.update({"aux." + k: v for k, v in directional_check(aux, est.tensors, g_aux, n_proj, seed=seed).items()})
    return out


def run_all(seed=0, n_proj=5):
    """``{suite: (tolerance, {tensor: deviation})}`` for every suite."""
    return {
        "toy-net": (NET_TOL, toy_net_suite(seed, n_proj)),
        "scene-joint-plain": (NET_TOL, scene_joint_suite(seed, n_proj, "plain")),
        "scene-joint-consistent": (NET_TOL, scene_joint_suite(seed, n_proj, "schedule_consistent")),
        "estimator": (ESTIMATOR_TOL, estimator_suite(seed, n_proj)),
    }
