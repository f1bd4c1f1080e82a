"""Joint flow-matching + confidence training loop, checkpoints, and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import confidence, io
from ..attention import FusionSchedule, alpha_schedule
from ..errors import DimensionError, DivergenceError, NumericFailureError, ValidationError
from ..rng import stream
from ..schedule import NoiseScheduleConfig, flow_state, sample_ode, sigma_map, velocity_target
from .batch import FlowBatch, SceneData, ToySpec, compute_confidence, from_latent, make_batch
from .metrics import image_metrics, mse
from .net import NetConfig, VelocityNet

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
CONFIDENCE_SOURCES = ("estimator", "heuristic", "zero")


@dataclass
class TrainConfig:
    task: str = "toy"                 # "toy" or "scene"
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.0
    grad_clip: float = None           # global-norm clip, off by default
    steps: int = 5000
    seed: int = 0
    stage: int = 1
    freeze_attention: bool = None     # default: True in stage 2
    init_checkpoint: str = None
    schedule: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=lambda: {"alpha_max": 1.0, "ramp_steps": 1000})
    alpha_fixed: float = None         # overrides the ramp (ablations)
    confidence: str = "estimator"
    aux_weight_init: float = 0.01
    estimator_hidden: int = 8
    encoder_features: int = 8
    latent_factor: int = 2
    net: dict = field(default_factory=dict)
    toy: dict = field(default_factory=dict)
    log_every: int = 100

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in ("toy", "scene"):
            raise ValidationError(f"task must be 'toy' or 'scene', got {self.task!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch_size must be positive and steps non-negative")
        if not self.lr >= 0:
            raise ValidationError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.stage not in (1, 2):
            raise ValidationError("stage must be 1 or 2")
        if self.confidence not in CONFIDENCE_SOURCES:
            raise ValidationError(f"confidence must be one of {CONFIDENCE_SOURCES}")
        if self.alpha_fixed is not None and not 0 <= self.alpha_fixed <= 1:
            raise ValidationError("alpha_fixed must lie in [0, 1]")
        self.sched()
        self.fusion_schedule()

    def sched(self):
        return NoiseScheduleConfig.from_dict(self.schedule)

    def fusion_schedule(self):
        return FusionSchedule(**self.fusion)

    def toy_spec(self):
        d = dict(self.toy)
        if "means" in d:
            d["means"] = tuple(tuple(m) for m in d["means"])
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return ToySpec(**d)

    def alpha(self, step):
        if self.alpha_fixed is not None:
            return float(self.alpha_fixed)
        return alpha_schedule(step, self.fusion_schedule())

    def to_dict(self):
        return asdict(self)


@dataclass
class LossResult:
    total: float
    fm: float
    aux: float
    net_grads: dict
    est_grads: dict = None


def toy_net_config(**overrides):
    d = dict(grid=(1, 1), x_channels=2, cond_channels=0, ref_channels=0, patch=1,
              d_model=64, ffn_mult=2, n_blocks=2, t_dim=32, pos_enc=False)
    d.update(overrides)
    return NetConfig(**d)


def scene_net_config(grid, **overrides):
    d = dict(grid=tuple(grid), x_channels=3, cond_channels=3, ref_channels=4, patch=2,
              d_model=32, ffn_mult=2, n_blocks=2, t_dim=16, pos_enc=True, boost_lambda=2.0)
    d.update(overrides)
    return NetConfig(**d)


def _check_finite(value, term):
    if not np.isfinite(value):
        raise NumericFailureError(f"non-finite {term} loss", term=term)


def loss(net: VelocityNet, est, batch: FlowBatch, sched: NoiseScheduleConfig = None,
         alpha=0.0, confidence_source="estimator", encoder=None) -> LossResult:
    """Flow-matching MSE plus the auxiliary confidence loss, with gradients.

    When the estimator supplies ``c``, gradients reach it through the net's
    conditioning channel, through ``Sigma_t`` in the flow state, through the
    schedule-consistent target (if used), and through the auxiliary loss.
    """
    sched = sched or NoiseScheduleConfig()
    use_est = batch.is_scene and confidence_source == "estimator" and est is not None
    if use_est:
        c, ecache = confidence.estimator_forward(batch.z_warp, batch.m_lat, est)
    else:
        c = batch.c
    sigma_t = sigma_map(c, batch.t, sched)
    x_t = flow_state(batch.x0, batch.x1, sigma_t)
    v = velocity_target(batch.x0, batch.x1, c, sched)
    if batch.is_scene:
        out, cache = net.forward(x_t, batch.t, c, batch.x_warp, batch.ref, batch.fg_mask, alpha)
    else:
        out, cache = net.forward(x_t, batch.t, c, alpha=alpha)
    resid = out - v
    fm = float(np.mean(resid * resid))
    _check_finite(fm, "fm")
    dout = 2.0 * resid / resid.size
    g_net, dx_t, dc = net.backward(dout, cache)

    aux = 0.0
    g_est = None
    if use_est:
        slope = sched.sigma_high - sched.sigma_low
        diff = batch.x1 - batch.x0
        t_b = np.asarray(batch.t, dtype=np.float64).reshape(-1, 1, 1)
        dc = dc + (dx_t * diff).sum(axis=-1) * slope * t_b
        if sched.velocity_mode == "schedule_consistent":
            dc = dc - (dout * diff).sum(axis=-1) * slope
        aux, ga, _ = confidence.aux_loss(c, batch.m_geo, batch.x_gt_pix, batch.x_warp_pix, est, encoder)
        _check_finite(aux, "aux")
        g_est, _, _ = confidence.estimator_backward(dc + ga["c"], ecache, est)
        g_est["lam1"] = np.asarray(ga["lam1"])
        g_est["lam2"] = np.asarray(ga["lam2"])
    total = fm + aux
    _check_finite(total, "total")
    return LossResult(total, fm, aux, g_net, g_est)


class SGD:
    """Gradient descent with optional heavy-ball momentum."""

    def __init__(self, lr, momentum=0.0, grad_clip=None):
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {}

    def step(self, params, grads, frozen=()):
        scale = 1.0
        if self.grad_clip:
            norm = np.sqrt(sum(float(np.sum(g * g)) for k, g in grads.items() if k not in frozen))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for k, g in grads.items():
            if k in frozen:
                continue
            if self.momentum:
                v = self.velocity.get(k)
                v = g * scale if v is None else self.momentum * v + g * scale
                self.velocity[k] = v
                params[k] -= self.lr * v
            else:
                params[k] -= self.lr * scale * g


@dataclass
class FlowModel:
    """Trained network, estimator and everything needed to sample from them."""

    net: VelocityNet
    est: confidence.EstimatorParams = None
    cfg: TrainConfig = field(default_factory=TrainConfig)
    encoder: confidence.FeatureEncoder = None
    alpha: float = 0.0

    def confidence_for(self, d, grid):
        return compute_confidence(self.cfg.confidence, self.est, d["z_warp"], d["m_lat"], d["m_geo"], grid)

    def velocity_field(self, d=None):
        if d is None:
            return lambda x, t, c: self.net(x, t, c, alpha=self.alpha)
        return lambda x, t, c: self.net(x, t, c, d["x_warp"], d["ref"], d["fg_tok"], self.alpha)

    def generate(self, x0, d=None, c=None, n_steps=20, grid=None):
        if c is None:
            c = np.zeros(x0.shape[:3]) if d is None else self.confidence_for(d, grid)
        return sample_ode(self.velocity_field(d), x0, c, self.cfg.sched(), n_steps)

    def tensors(self):
        out = {"net." + k: v for k, v in self.net.params.items()}
        if self.est is not None:
            out.update({"est." + k: v for k, v in self.est.tensors.items()})
        return out

    def save(self, path):
        meta = {
            "net": self.net.cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "alpha": self.alpha,
            "encoder": None if self.encoder is None else {"n_features": self.encoder.n_features},
        }
        io.save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path):
        tensors, meta = io.load_checkpoint(path)
        net_cfg = NetConfig.from_dict(meta["net"])
        net = VelocityNet(net_cfg, {k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        est_t = {k[4:]: v for k, v in tensors.items() if k.startswith("est.")}
        est = confidence.EstimatorParams(est_t) if est_t else None
        enc = None
        if meta.get("encoder"):
            enc = confidence.FeatureEncoder(meta["encoder"]["n_features"])
        return cls(net, est, TrainConfig.from_dict(meta["train"]), enc, meta.get("alpha", 0.0))


def build_model(cfg: TrainConfig, grid=None):
    if cfg.task == "toy":
        net = VelocityNet(toy_net_config(**cfg.net), seed=cfg.seed)
        return FlowModel(net, None, cfg)
    enc = confidence.FeatureEncoder(cfg.encoder_features)
    net = VelocityNet(scene_net_config(grid, **cfg.net), seed=cfg.seed)
    est = confidence.EstimatorParams.init(enc.n_features, cfg.estimator_hidden, seed=cfg.seed,
                                          aux_weight=cfg.aux_weight_init)
    return FlowModel(net, est, cfg, enc)


def _compatible(model, grid):
    if model.net.cfg.grid != tuple(grid):
        raise DimensionError(f"checkpoint grid {model.net.cfg.grid} does not match data grid {tuple(grid)}")


def train(cfg: TrainConfig, data=None, model: FlowModel = None, callback=None):
    """Run ``cfg.steps`` descent steps; returns ``(model, history)``.

    ``data`` is a :class:`SceneData` for the scene task and is ignored for
    the toy task. ``history`` rows are ``(step, fm_loss, aux_loss, alpha)``.
    """
    if cfg.task == "toy":
        source = cfg.toy_spec()
        grid = (1, 1)
    else:
        if not isinstance(data, SceneData):
            raise ValidationError("scene training needs SceneData")
        source = data
        grid = data.grid
    if model is None:
        if cfg.init_checkpoint:
            model = FlowModel.load(cfg.init_checkpoint)
            model.cfg = cfg
        else:
            model = build_model(cfg, grid)
    _compatible(model, grid)
    if model.encoder is None and cfg.task == "scene":
        model.encoder = confidence.default_encoder()

    sched = cfg.sched()
    freeze = cfg.freeze_attention if cfg.freeze_attention is not None else cfg.stage == 2
    frozen = set(model.net.attention_param_names()) if freeze else set()
    opt_net = SGD(cfg.lr, cfg.momentum, cfg.grad_clip)
    opt_est = SGD(cfg.lr, cfg.momentum, cfg.grad_clip)
    rng = stream(cfg.seed, "batches", cfg.stage)
    history = []
    alpha = cfg.alpha(0)
    for step in range(cfg.steps):
        alpha = cfg.alpha(step)
        batch = make_batch(source, cfg.batch_size, rng, sched, model.est, cfg.confidence)
        res = loss(model.net, model.est, batch, sched, alpha, cfg.confidence, model.encoder)
        if res.total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss {res.total:.3g} exceeded {DIVERGENCE_LIMIT:g} at step {step}",
                                  term="fm" if res.fm > res.aux else "aux")
        history.append((step, res.fm, res.aux, alpha))
        opt_net.step(model.net.params, res.net_grads, frozen)
        if res.est_grads is not None:
            opt_est.step(model.est.tensors, res.est_grads)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d fm %.5f aux %.5f alpha %.3f", step, res.fm, res.aux, alpha)
        if callback is not None:
            callback(step, res)
    model.alpha = cfg.alpha(cfg.steps) if cfg.steps else alpha
    return model, history


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "fm_loss", "aux_loss", "alpha"])
        for step, fm, aux, alpha in history:
            w.writerow([step, repr(float(fm)), repr(float(aux)), repr(float(alpha))])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["fm_loss"]), float(r["aux_loss"]), float(r["alpha"])) for r in rows]


def zero_net_baseline(spec: ToySpec, n=200_000, seed=0, sched=None):
    """FM loss of a network that always outputs zero, by Monte Carlo."""
    b = make_batch(spec, n, stream(seed, "baseline"), sched)
    return float(np.mean(b.v_target ** 2))


def toy_fm_loss(model: FlowModel, spec: ToySpec, n=20_000, seed=0):
    b = make_batch(spec, n, stream(seed, "toy-eval"), model.cfg.sched())
    return loss(model.net, None, b, model.cfg.sched(), model.alpha).fm


def toy_samples(model: FlowModel, n=10_000, seed=0, n_steps=50, chunk=2500):
    rng = stream(seed, "sampling")
    x0 = rng.standard_normal((n, 1, 1, 2))
    out = np.concatenate([model.generate(x0[i:i + chunk], n_steps=n_steps) for i in range(0, n, chunk)])
    return out.reshape(n, 2)


def predict_scene(model: FlowModel, data: SceneData, idx, n_steps=20, seed=0):
    """Generated latents for examples ``idx`` (noise is fixed per example index)."""
    _compatible(model, data.grid)
    idx = np.asarray(idx, dtype=np.int64)
    rng = stream(seed, "eval-noise")
    x0_all = rng.standard_normal((len(data),) + data.grid + (model.net.cfg.x_channels,))
    d = data.gather(idx)
    return model.generate(x0_all[idx], d, n_steps=n_steps, grid=data.grid), d


def evaluate_scene(model: FlowModel, data: SceneData, n_steps=20, seed=0, chunk=16):
    """Generate every example of ``data`` and score it against the target.

    Returns per-example metric dicts; ``region_mse`` is the MSE over
    disoccluded or target-foreground latent sites.
    """
    n = len(data)
    records = []
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        x_hat, d = predict_scene(model, data, idx, n_steps, seed)
        pred, tgt = from_latent(x_hat), from_latent(d["x1"])
        for j, i in enumerate(idx):
            inside = d["m_lat"][j] >= 0.5
            rec = {"index": int(i)}
            rec.update(image_metrics(pred[j], tgt[j], inside))
            rec["region_mse"] = mse(pred[j], tgt[j], d["region"][j])
            rec["mse"] = mse(pred[j], tgt[j])
            records.append(rec)
    return records


def summarize(records):
    """Mean of each metric over records, ignoring undefined (NaN) entries."""
    keys = [k for k in records[0] if k != "index"]
    out = {}
    for k in keys:
        v = np.array([r[k] for r in records], dtype=np.float64)
        v = v[~np.isnan(v)]
        out[k] = float(v.mean()) if v.size else float("nan")
    return out
