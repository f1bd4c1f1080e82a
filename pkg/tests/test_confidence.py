import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warp4d import confidence, gradcheck, io, nn
from warp4d.confidence import (
    EstimatorParams,
    FeatureEncoder,
    aux_loss,
    box_blur,
    encode_features,
    estimate_confidence,
    heuristic_confidence,
)
from warp4d.errors import DimensionError, DomainError

seeds = st.integers(0, 2**32 - 1)


def hand_box_filter(m, r):
    H, W = m.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    acc += m[min(max(i + di, 0), H - 1), min(max(j + dj, 0), W - 1)]
            out[i, j] = acc / (2 * r + 1) ** 2
    return out


# -- heuristic ---------------------------------------------------------------

@pytest.mark.parametrize("value", [0.0, 1.0])
def test_heuristic_constant_masks(value):
    np.testing.assert_array_equal(heuristic_confidence(np.full((8, 12), value), 2, (4, 6)), value)


def test_heuristic_half_plane_boundary():
    m = np.zeros((10, 12))
    m[:, 6:] = 1
    c = heuristic_confidence(m, 2)
    oracle = hand_box_filter(m, 2)
    np.testing.assert_allclose(c[:, 3:9], oracle[:, 3:9], atol=1e-15)
    np.testing.assert_allclose(c[5, 3:9], [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(0, 3))
def test_heuristic_matches_box_oracle_and_range(seed, r):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(6, 8)) > 0.5
    np.testing.assert_allclose(box_blur(m, r), hand_box_filter(m.astype(float), r), atol=1e-12)
    c = heuristic_confidence(m, r, (3, 4))
    assert c.shape == (3, 4) and c.min() >= 0 and c.max() <= 1


def test_heuristic_radius_zero_is_area_resample():
    rng = np.random.default_rng(0)
    m = rng.uniform(size=(8, 12)) > 0.4
    np.testing.assert_array_equal(heuristic_confidence(m, 0, (4, 6)), nn.area_pool(m[..., None].astype(float), 2)[..., 0])
    with pytest.raises(DomainError):
        heuristic_confidence(m, -1)


# -- encoder -----------------------------------------------------------------

def test_encoder_zero_and_linear():
    enc = FeatureEncoder(6, seed=3)
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 8, 8, 3))
    np.testing.assert_array_equal(enc(np.zeros((8, 8, 3))), 0.0)
    np.testing.assert_allclose(enc(a) - enc(b), enc(a - b), atol=1e-14)
    assert enc(a).shape == (8, 8, 6)


def test_encoder_deterministic():
    x = np.random.default_rng(2).uniform(size=(4, 4, 3))
    assert FeatureEncoder(seed=5)(x).tobytes() == FeatureEncoder(seed=5)(x).tobytes()
    assert encode_features(x).tobytes() == encode_features(x).tobytes()


def test_encoder_operator_norm_by_power_iteration():
    enc = FeatureEncoder(8, seed=0)
    shape = (8, 8, 3)
    n = int(np.prod(shape))
    A = np.stack([enc(e.reshape(shape)).reshape(-1) for e in np.eye(n)], axis=1)
    v = np.random.default_rng(0).normal(size=n)
    for _ in range(500):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    sigma = np.linalg.norm(A @ v)
    assert sigma <= enc.operator_norm_bound() + 1e-9
    assert sigma == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)


def test_encoder_size_check():
    with pytest.raises(DimensionError):
        FeatureEncoder()(np.zeros((6, 8, 3)))


# -- estimator ---------------------------------------------------------------

def test_zero_final_layer_gives_half():
    p = EstimatorParams.init(8, hidden=4, seed=0, zero_final=True)
    z = np.random.default_rng(0).normal(size=(5, 7, 8))
    np.testing.assert_array_equal(estimate_confidence(z, np.ones((5, 7)), p), 0.5)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_estimator_output_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = EstimatorParams.init(4, hidden=3, seed=seed % 1000)
    z = rng.normal(size=(2, 4, 5, 4)) * rng.uniform(0.1, 50)
    c = estimate_confidence(z, rng.uniform(size=(2, 4, 5)) > 0.5, p)
    assert c.shape == (2, 4, 5) and np.all(c > 0) and np.all(c < 1)


def test_estimator_shape_errors():
    p = EstimatorParams.init(4)
    with pytest.raises(DimensionError):
        estimate_confidence(np.zeros((4, 5, 3)), np.zeros((4, 5)), p)
    with pytest.raises(DimensionError):
        estimate_confidence(np.zeros((4, 5, 4)), np.zeros((4, 6)), p)


@pytest.mark.parametrize("seed", range(5))
def test_estimator_gradients_finite_differences(seed):
    devs = gradcheck.estimator_suite(seed)
    assert max(devs.values()) < gradcheck.ESTIMATOR_TOL, devs


def test_estimator_params_checkpoint_round_trip(tmp_path):
    p = EstimatorParams.init(8, seed=2, aux_weight=0.3)
    io.save_checkpoint(tmp_path / "est.ckpt", p.tensors, {"kind": "estimator"})
    t, meta = io.load_checkpoint(tmp_path / "est.ckpt")
    back = EstimatorParams(t)
    for k in EstimatorParams.names:
        np.testing.assert_array_equal(back[k], p[k].astype(np.float32))
    assert back.weights[0] == pytest.approx(0.3, rel=1e-6)
    assert meta == {"kind": "estimator"}


# -- auxiliary loss ----------------------------------------------------------

def _frames(rng, B=2, H=8, W=8):
    x = rng.uniform(size=(B, H, W, 3))
    m = (rng.uniform(size=(B, H, W)) > 0.3).astype(float)
    return x, m


def test_aux_zero_when_targets_met():
    rng = np.random.default_rng(0)
    x, m = _frames(rng, B=1)
    p = EstimatorParams.init(8)
    c = nn.bilinear_resize(m[0], (4, 4))
    loss, _, parts = aux_loss(c, m[0], x[0], x[0], p)
    # second target is |E(x) - E(x)| = 0, so only c itself remains in it
    assert parts[0] == 0.0
    assert parts[1] == pytest.approx(np.sum(c * c))
    m1 = np.zeros_like(m[0])
    loss, _, parts = aux_loss(np.zeros((4, 4)), m1, x[0], x[0], p)
    assert loss == 0.0 and parts == (0.0, 0.0)


def test_aux_uniform_offset_closed_form():
    rng = np.random.default_rng(1)
    x, m = _frames(rng, B=1)
    p = EstimatorParams.init(8, aux_weight=0.6)
    delta = 0.125
    c = nn.bilinear_resize(m[0], (4, 4)) + delta
    loss, _, parts = aux_loss(c, m[0], x[0], x[0], p)
    assert parts[0] == pytest.approx(16 * delta ** 2, rel=1e-12)
    assert loss - p.weights[1] * parts[1] == pytest.approx(p.weights[0] * 16 * delta ** 2, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_aux_nonnegative_and_monotone(seed):
    rng = np.random.default_rng(seed)
    x, m = _frames(rng)
    xw = x * m[..., None]
    p = EstimatorParams.init(8, aux_weight=float(rng.uniform(0.01, 2)))
    target = np.stack([nn.bilinear_resize(mi, (4, 4)) for mi in m])
    loss_small, _, _ = aux_loss(np.clip(target + 0.05, 0, 1), m, x, xw, p)
    loss, _, _ = aux_loss(rng.uniform(size=(2, 4, 4)), m, x, xw, p)
    assert loss >= 0 and loss_small >= 0
    # growing the first residual with the second unchanged cannot decrease the loss
    big = EstimatorParams({**p.tensors, "lam1": p["lam1"] + 1.0})
    assert aux_loss(target, m, x, xw, big)[0] >= aux_loss(target, m, x, xw, p)[0]


def test_aux_gradient_wrt_c():
    rng = np.random.default_rng(3)
    x, m = _frames(rng)
    xw = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    p = EstimatorParams.init(8, aux_weight=0.4)
    c = rng.uniform(size=(2, 4, 4))
    _, g, _ = aux_loss(c, m, x, xw, p)
    h = 1e-6
    for _ in range(5):
        d = rng.normal(size=c.shape)
        fd = (aux_loss(c + h * d, m, x, xw, p)[0] - aux_loss(c - h * d, m, x, xw, p)[0]) / (2 * h)
        assert fd == pytest.approx(np.sum(g["c"] * d), rel=1e-4)


def test_aux_shape_errors():
    p = EstimatorParams.init(8)
    with pytest.raises(DimensionError):
        aux_loss(np.zeros((3, 4)), np.zeros((8, 8)), np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), p)
    with pytest.raises(DimensionError):
        aux_loss(np.zeros((4, 4)), np.zeros((8, 8)), np.zeros((8, 8, 3)), np.zeros((8, 6, 3)), p)


def test_feature_discrepancy_shape():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 8, 12, 3))
    d = confidence.feature_discrepancy(a, b, 2)
    assert d.shape == (4, 6) and np.all(d >= 0)
