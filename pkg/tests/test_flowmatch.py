import math

import numpy as np
import pytest

from warp4d import gradcheck, io
from warp4d.errors import DimensionError, DivergenceError, NumericFailureError, ValidationError
from warp4d.flowmatch.batch import SceneData, ToySpec, from_latent, make_batch, round_trip_warp, to_latent
from warp4d.flowmatch.metrics import image_metrics, mse, psnr, ssim, ssim_map
from warp4d.flowmatch.net import NetConfig, VelocityNet
from warp4d.flowmatch.train import (
    FlowModel,
    TrainConfig,
    evaluate_scene,
    loss,
    read_loss_csv,
    summarize,
    toy_net_config,
    train,
    write_loss_csv,
    zero_net_baseline,
)
from warp4d.rng import stream
from warp4d.schedule import NoiseScheduleConfig, flow_state
from warp4d.synthdata import SynthConfig, generate_sample

SCENE_CFG = SynthConfig(n_frames=2, height=24, width=24, link_radius=(0.15, 0.25))


@pytest.fixture(scope="module")
def scene_data():
    return SceneData([generate_sample(SCENE_CFG, s) for s in range(2)])


def small_toy_cfg(**kw):
    d = dict(task="toy", batch_size=32, lr=0.01, momentum=0.9, steps=40, log_every=0,
             net={"d_model": 16, "t_dim": 8})
    d.update(kw)
    return TrainConfig(**d)


# -- network -----------------------------------------------------------------

def test_net_output_shape_and_param_budget():
    net = VelocityNet(NetConfig(grid=(24, 42), x_channels=3, cond_channels=3, ref_channels=4, patch=2,
                                d_model=32, t_dim=16, pos_enc=True))
    assert net.n_params <= 200_000
    x = np.zeros((1, 24, 42, 3))
    out = net(x, 0.3, np.zeros((1, 24, 42)), x, np.zeros((1, 24, 42, 4)), np.zeros((1, 252)), 0.5)
    assert out.shape == x.shape and np.all(np.isfinite(out))


def test_net_rejects_bad_shapes():
    net = VelocityNet(toy_net_config())
    with pytest.raises(DimensionError):
        net(np.zeros((2, 1, 1, 3)), 0.5, np.zeros((2, 1, 1)))
    with pytest.raises(ValidationError):
        NetConfig(grid=(5, 4), patch=2)
    with pytest.raises(DimensionError):
        VelocityNet(toy_net_config(), params={"embed.w": np.zeros((1, 1))})


def test_toy_gradients_finite_differences():
    devs = gradcheck.toy_net_suite(seed=1)
    assert max(devs.values()) < gradcheck.NET_TOL, devs


@pytest.mark.parametrize("mode", ["plain", "schedule_consistent"])
def test_joint_gradients_finite_differences(mode):
    devs = gradcheck.scene_joint_suite(seed=2, velocity_mode=mode)
    assert any(k.startswith("est.") for k in devs)
    assert max(devs.values()) < gradcheck.NET_TOL, devs


# -- batches -----------------------------------------------------------------

def test_toy_batch():
    b = make_batch(ToySpec(), 64, np.random.default_rng(0))
    assert b.x1.shape == (64, 1, 1, 2) and not b.c.any()
    assert np.all((b.t >= 0) & (b.t <= 1))
    b2 = make_batch(ToySpec(), 64, np.random.default_rng(0))
    assert b.x_t.tobytes() == b2.x_t.tobytes() and b.x1.tobytes() == b2.x1.tobytes()


def test_toy_spec_validation_and_assign():
    with pytest.raises(ValidationError):
        ToySpec(weights=(0.5, 0.6))
    assert ToySpec().assign(np.array([[-4.0, 0.1], [6.0, -1.0]])).tolist() == [0, 1]


def test_scene_batch_self_consistent(scene_data):
    est = None
    b = make_batch(scene_data, 4, np.random.default_rng(1), confidence_source="heuristic", est=est)
    assert b.x_t.tobytes() == flow_state(b.x0, b.x1, b.sigma_t).tobytes()
    assert b.c.shape == (4,) + scene_data.grid and b.c.min() >= 0 and b.c.max() <= 1
    assert b.ref.shape[-1] == 4 and b.fg_mask.shape == (4, scene_data.grid[0] * scene_data.grid[1] // 4)


def test_scene_data_shapes(scene_data):
    assert scene_data.grid == (12, 12)
    assert len(scene_data) == 4
    ex = scene_data.examples[0]
    np.testing.assert_allclose(from_latent(ex["x1"]), from_latent(to_latent(ex["x_gt_pix"], 2)))
    with pytest.raises(ValidationError):
        SceneData([])


def test_round_trip_prior_identity():
    s = generate_sample(SCENE_CFG, 4)
    mid, back, mid_fg = round_trip_warp(s.frames_a[0], s.depths_a[0], s.masks_a[0], s.cam_a, s.cam_a)
    np.testing.assert_array_equal(back.rgb, s.frames_a[0])
    np.testing.assert_array_equal(mid_fg, s.masks_a[0])


# -- loss --------------------------------------------------------------------

class FrozenNet:
    """Stand-in network that returns a fixed output."""

    def __init__(self, out):
        self.out = out

    def forward(self, x_t, t, c, *args, **kw):
        return self.out, None

    def backward(self, dout, cache):
        return {}, np.zeros_like(self.out), np.zeros(self.out.shape[:3])


def test_loss_zero_for_exact_velocity():
    b = make_batch(ToySpec(), 32, np.random.default_rng(2))
    assert loss(FrozenNet(b.v_target), None, b).total == 0.0


def test_zero_net_loss_matches_monte_carlo_oracle():
    spec = ToySpec()
    rng = np.random.default_rng(3)
    n = 200_000
    comp = rng.choice(2, n, p=[0.3, 0.7])
    x1 = np.array(spec.means)[comp] + 0.3 * rng.standard_normal((n, 2))
    x0 = rng.standard_normal((n, 2))
    oracle = np.mean((x1 - x0) ** 2)
    # per element: x-axis 25 + 0.09 + 1, y-axis 0.09 + 1
    assert oracle == pytest.approx((26.09 + 1.09) / 2, rel=0.01)
    assert zero_net_baseline(spec, n=n, seed=0) == pytest.approx(oracle, rel=0.01)
    b = make_batch(spec, 4096, np.random.default_rng(4))
    zero = FrozenNet(np.zeros_like(b.v_target))
    assert loss(zero, None, b).fm == pytest.approx(float(np.mean(b.v_target ** 2)))


def test_nonfinite_loss_names_term():
    b = make_batch(ToySpec(), 8, np.random.default_rng(5))
    bad = FrozenNet(np.full_like(b.v_target, np.nan))
    with pytest.raises(NumericFailureError) as err:
        loss(bad, None, b)
    assert err.value.term == "fm"


# -- training ----------------------------------------------------------------

def test_lr_zero_keeps_params_and_checkpoint_bytes(tmp_path):
    cfg = small_toy_cfg(lr=0.0, steps=10)
    model, hist = train(cfg)
    init = VelocityNet(toy_net_config(**cfg.net), seed=cfg.seed)
    for k, v in init.params.items():
        np.testing.assert_array_equal(model.net.params[k], v)
    b = make_batch(ToySpec(), 512, stream(0, "probe"))
    assert loss(model.net, None, b).fm == loss(init, None, b).fm


def test_training_deterministic(tmp_path):
    paths = []
    for k in range(2):
        model, hist = train(small_toy_cfg(steps=25))
        p = tmp_path / f"m{k}.ckpt"
        model.save(p)
        write_loss_csv(tmp_path / f"l{k}.csv", hist)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()


@pytest.mark.parametrize("seed", range(3))
def test_toy_loss_decreases(seed):
    _, hist = train(small_toy_cfg(steps=300, seed=seed, batch_size=64))
    fm = np.array([h[1] for h in hist])
    assert np.median(fm[-30:]) < np.median(fm[:30])


def test_divergence_aborts():
    with pytest.raises(DivergenceError):
        train(small_toy_cfg(lr=5.0, momentum=0.0, steps=200))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"stpes": 3})
    for bad in ({"task": "video"}, {"lr": -1.0}, {"stage": 3}, {"confidence": "oracle"}, {"momentum": 1.0}):
        with pytest.raises(ValidationError):
            TrainConfig.from_dict(bad)


def test_loss_csv_round_trip(tmp_path):
    hist = [(0, 1.5, 0.25, 0.0), (1, 1.25, 0.125, 0.001)]
    write_loss_csv(tmp_path / "loss.csv", hist)
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,fm_loss,aux_loss,alpha"
    assert read_loss_csv(tmp_path / "loss.csv") == hist


def test_scene_training_stage2_freezes_attention(scene_data, tmp_path):
    cfg = TrainConfig(task="scene", batch_size=2, steps=3, log_every=0, lr=0.01)
    model, hist = train(cfg, scene_data)
    assert len(hist) == 3 and all(h[2] > 0 for h in hist)
    model.save(tmp_path / "s1.ckpt")
    before = {k: v.copy() for k, v in FlowModel.load(tmp_path / "s1.ckpt").net.params.items()}
    cfg2 = TrainConfig(task="scene", batch_size=2, steps=3, log_every=0, lr=0.01, stage=2,
                       init_checkpoint=str(tmp_path / "s1.ckpt"))
    model2, _ = train(cfg2, scene_data)
    for k in model2.net.attention_param_names():
        np.testing.assert_array_equal(model2.net.params[k], before[k])
    assert any(not np.array_equal(model2.net.params[k], before[k]) for k in before if ".attn." not in k)


def test_checkpoint_round_trip_and_evaluation(scene_data, tmp_path):
    cfg = TrainConfig(task="scene", batch_size=2, steps=2, log_every=0)
    model, _ = train(cfg, scene_data)
    model.save(tmp_path / "m.ckpt")
    back = FlowModel.load(tmp_path / "m.ckpt")
    for k, v in model.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v.astype(np.float32))
    recs = evaluate_scene(back, scene_data, n_steps=2)
    assert len(recs) == len(scene_data)
    s = summarize(recs)
    assert {"psnr", "ssim", "psnr_in", "psnr_out", "region_mse"} <= set(s)
    other = SceneData([generate_sample(SynthConfig(n_frames=1, height=32, width=32), 0)])
    with pytest.raises(DimensionError):
        evaluate_scene(back, other)


def test_checkpoint_layout(tmp_path):
    io.save_checkpoint(tmp_path / "c", {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)}, {"x": 1})
    raw = (tmp_path / "c").read_bytes()
    header, payload = raw.split(b"\n", 1)
    assert len(payload) == 7 * 4
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [0, 1, 2, 3, 4, 5, 2.5])


# -- metrics -----------------------------------------------------------------

def naive_ssim(a, b):
    """Per-window SSIM with explicit loops over every valid 11x11 window."""
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)]
    w = [[gi * gj for gj in g] for gi in g]
    tot = sum(map(sum, w))
    w = [[v / tot for v in row] for row in w]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    H, W = a.shape
    for r in range(H - 10):
        for c in range(W - 10):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(11):
                for j in range(11):
                    x, y, k = a[r + i, c + j], b[r + i, c + j], w[i][j]
                    ma += k * x
                    mb += k * y
                    saa += k * x * x
                    sbb += k * y * y
                    sab += k * x * y
            saa -= ma * ma
            sbb -= mb * mb
            sab -= ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2)))
    return sum(vals) / len(vals)


def test_identical_images():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr(x, x) == 99.0
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_uniform_offset_psnr():
    x = np.full((12, 12), 0.3)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_ssim_matches_naive_reference():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(16, 18))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)
    assert ssim_map(a, b).shape == (6, 8)


def test_masked_metrics():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 16, 3))
    b = a.copy()
    m = np.zeros((16, 16), bool)
    m[:, :8] = True
    b[~m] += 0.1
    assert mse(a, b, m) == 0.0
    assert mse(a, b, ~m) == pytest.approx(0.01)
    out = image_metrics(b, a, m)
    assert out["psnr_in"] == 99.0 and out["psnr_out"] == pytest.approx(20.0)
    assert math.isnan(mse(a, b, np.zeros((16, 16), bool)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
