import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import loss_by_loops
from slabfill.errors import ConfigError, ShapeMismatch
from slabfill.synthgen import GeneratorConfig, SlabTriplet
from slabfill.trainer import (
    AdamState,
    TrainConfig,
    ValidationSet,
    adam_step,
    baseline_mae,
    batch_loss,
    loss,
    minmax_normalize,
    minmax_normalize_triplet,
    report_path,
    sobel_magnitude,
    train,
    validate,
)
from slabfill.unet import NetworkConfig, init_network, load_model
from slabfill.volgrid import SliceImage

TINY_NET = NetworkConfig(levels=1, base_channels=2)
TINY_GEN = GeneratorConfig(slice_size=16)


def tiny_train_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, max_steps=3, val_interval=2, val_size=6, patience=5, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    assert TrainConfig().learning_rate == 1e-6 and TrainConfig().val_size == 1000
    for bad in ({"adam_beta1": 1.0}, {"val_size": 0}, {"learning_rate": -1}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1})


# -- normalisation ---------------------------------------------------------------


def test_minmax_joint_range():
    x1 = np.array([[0.2, 0.6]])
    x2 = np.array([[0.4, 0.8]])
    (a, b, y), (lo, span) = minmax_normalize(x1, x2, np.array([[0.5, 0.5]]))
    assert lo == 0.2 and span == pytest.approx(0.6)
    np.testing.assert_allclose(a, [[0, 2 / 3]])
    np.testing.assert_allclose(b, [[1 / 3, 1]])
    np.testing.assert_allclose(y, 0.5)


def test_minmax_constant_gives_zeros():
    s = SliceImage(np.full((1, 3, 3), 0.4))
    t = minmax_normalize_triplet(SlabTriplet(s, s, s, 1.0, 1.0))
    for img in (t.x1, t.x2, t.y):
        assert not np.any(img.pixels)


def test_minmax_identity_on_normalised(rng):
    x1 = rng.random((4, 4))
    x1[0, 0], x1[0, 1] = 0.0, 1.0
    x2 = rng.random((4, 4))
    (a, b), _ = minmax_normalize(x1, x2)
    np.testing.assert_array_equal(a, x1)
    np.testing.assert_array_equal(b, x2)


# -- Sobel and loss ------------------------------------------------------------------


def test_sobel_ramps():
    ramp = np.tile(np.arange(7.0), (6, 1))
    assert np.all(sobel_magnitude(ramp)[1:-1, 1:-1] == 8.0)
    assert np.all(sobel_magnitude(ramp.T)[1:-1, 1:-1] == 8.0)
    assert not np.any(sobel_magnitude(np.full((5, 5), 0.3)))
    out = sobel_magnitude(SliceImage(ramp[None]))
    assert isinstance(out, SliceImage) and out.pixels.shape == (1, 6, 7)


def test_loss_identity_and_offset(rng):
    img = rng.random((6, 6))
    value, grad = loss(img, img)
    assert value == 0 and not np.any(grad)
    value, _ = loss(img + 0.25, img)
    assert value == pytest.approx(0.25, abs=1e-12)


def test_loss_matches_scalar_oracle():
    pred = np.array([
        [0.1, 0.5, 0.9, 0.3, 0.0],
        [0.7, 0.2, 0.4, 0.8, 0.6],
        [0.0, 1.0, 0.5, 0.5, 0.2],
        [0.3, 0.3, 0.9, 0.1, 0.4],
        [0.6, 0.8, 0.2, 0.7, 1.0],
    ])
    target = np.array([
        [0.2, 0.5, 0.7, 0.3, 0.1],
        [0.6, 0.1, 0.4, 0.9, 0.6],
        [0.1, 0.9, 0.6, 0.4, 0.2],
        [0.3, 0.2, 0.8, 0.1, 0.5],
        [0.5, 0.8, 0.3, 0.6, 0.9],
    ])
    for lam in (0.0, 1.0, 0.3):
        assert loss(pred, target, lam)[0] == pytest.approx(loss_by_loops(pred, target, lam), abs=1e-12)


@given(arrays(np.float64, (5, 6), elements=st.floats(0, 1)), arrays(np.float64, (5, 6), elements=st.floats(0, 1)))
def test_loss_non_negative_and_zero_iff_equal(a, b):
    value, _ = loss(a, b)
    assert value >= 0
    assert (value == 0) == np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((1, 6, 7))
    target = rng.random((1, 6, 7))
    _, grad = batch_loss(pred, target, 1.0)
    h = 1e-7
    fd = np.empty_like(pred)
    for idx in np.ndindex(pred.shape):
        p = pred.copy()
        p[idx] += h
        up = batch_loss(p, target, 1.0)[0]
        p[idx] -= 2 * h
        fd[idx] = (up - batch_loss(p, target, 1.0)[0]) / (2 * h)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(fd) < 1e-4


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss(np.zeros((3, 3)), np.zeros((3, 4)))


# -- Adam ----------------------------------------------------------------------------


def test_adam_first_step():
    cfg = TrainConfig(learning_rate=1e-3)
    params = {"theta": np.zeros(1)}
    new, state = adam_step(params, {"theta": np.array([0.5])}, AdamState.zeros_like(params), cfg)
    assert state.step == 1
    assert new["theta"][0] == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-12)
    assert new["theta"][0] == pytest.approx(-9.99998e-4, rel=1e-5)


def test_adam_zero_gradient():
    params = {"a": np.arange(3.0), "b": np.ones((2, 2))}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    new, state = adam_step(params, grads, AdamState.zeros_like(params), TrainConfig(learning_rate=0.1))
    assert state.step == 1
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])


def test_adam_second_step_not_larger():
    cfg = TrainConfig(learning_rate=1e-3)
    params = {"t": np.zeros(1)}
    g = {"t": np.array([0.5])}
    p1, s1 = adam_step(params, g, AdamState.zeros_like(params), cfg)
    p2, _ = adam_step(p1, g, s1, cfg)
    assert abs(p2["t"][0] - p1["t"][0]) <= abs(p1["t"][0]) * (1 + 1e-6)


def test_adam_shape_mismatch():
    params = {"t": np.zeros(2)}
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"t": np.zeros(3)}, AdamState.zeros_like(params), TrainConfig())


# -- validation and training -------------------------------------------------------------


def test_validate_at_init_equals_baseline(rng):
    vs = ValidationSet(rng.random((5, 8, 8)), rng.random((5, 8, 8)), rng.random((5, 8, 8)),
                       rng.integers(1, 6, 5).astype(float), rng.integers(1, 6, 5).astype(float))
    params = init_network(TINY_NET, rng, dtype=np.float64)
    assert validate(params, vs) == pytest.approx(baseline_mae(vs), abs=1e-12)


def test_validate_perfect_prediction_is_zero(rng):
    x1 = rng.random((3, 8, 8))
    x2 = rng.random((3, 8, 8))
    d1 = np.array([1.0, 2.0, 3.0])
    d2 = np.array([3.0, 2.0, 1.0])
    y = (d2[:, None, None] * x1 + d1[:, None, None] * x2) / 4.0
    params = init_network(TINY_NET, rng, dtype=np.float64)
    assert validate(params, ValidationSet(x1, x2, y, d1, d2)) == pytest.approx(0, abs=1e-15)


def test_train_zero_steps(tmp_path, small_phantom):
    out = tmp_path / "m.slab"
    cfg = tiny_train_cfg(max_steps=0)
    report = train(TINY_GEN, TINY_NET, cfg, [small_phantom], out)
    assert report.train_loss == [] and report.best_step == 0
    init_seq = np.random.SeedSequence(cfg.seed).spawn(3)[0]
    assert load_model(out) == init_network(TINY_NET, np.random.default_rng(init_seq))


def test_train_lr_zero_keeps_parameters(tmp_path, small_phantom):
    a = train(TINY_GEN, TINY_NET, tiny_train_cfg(max_steps=0), [small_phantom], tmp_path / "a.slab")
    b = train(TINY_GEN, TINY_NET, tiny_train_cfg(learning_rate=0.0), [small_phantom], tmp_path / "b.slab")
    assert len(b.train_loss) == 3 and a.train_loss == []
    assert load_model(tmp_path / "a.slab") == load_model(tmp_path / "b.slab")


def test_train_deterministic(tmp_path, small_phantom):
    for name in ("a", "b"):
        train(TINY_GEN, TINY_NET, tiny_train_cfg(), [small_phantom], tmp_path / f"{name}.slab")
    assert (tmp_path / "a.slab").read_bytes() == (tmp_path / "b.slab").read_bytes()
    ra, rb = report_path(tmp_path / "a.slab"), report_path(tmp_path / "b.slab")
    assert ra.read_bytes() == rb.read_bytes()
    report = json.loads(ra.read_text())
    assert {"steps", "train_loss", "val_steps", "val_mae", "best_step", "config_echo"} <= set(report)
    assert report["best_val_mae"] <= min(report["val_mae"])
    assert report["steps"] == sorted(report["steps"]) and report["val_steps"] == sorted(report["val_steps"])
