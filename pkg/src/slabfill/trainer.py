"""Loss, Adam optimisation and the training loop for the imputation network."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .synthgen import GeneratorConfig, SlabTriplet, make_batch
from .unet import (
    NetworkConfig,
    NetworkParameters,
    backward,
    forward,
    init_network,
    linear_interpolation,
    network_input,
    predict_batch,
    save_model,
)
from .volgrid import SliceImage

log = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    grad_loss_weight: float = 1.0
    max_steps: int = 200_000
    val_interval: int = 500
    val_size: int = 1000
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(f"training config: {msg}")

        need(self.learning_rate >= 0 and math.isfinite(self.learning_rate), "learning_rate must be non-negative")
        need(0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1, "Adam betas must lie in (0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.batch_size >= 1, "batch_size must be positive")
        need(self.grad_loss_weight >= 0, "grad_loss_weight must be non-negative")
        need(self.max_steps >= 0, "max_steps must be non-negative")
        need(self.val_interval >= 1 and self.val_size >= 1 and self.patience >= 1,
             "val_interval, val_size and patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# Small-budget profile: the full-scale learning rate of 1e-6 does not
# converge within a few thousand CPU steps.
DESK_NETWORK = NetworkConfig(levels=4, base_channels=8)
DESK_TRAINING = TrainConfig(learning_rate=1e-4, max_steps=5000, val_interval=250, val_size=1000, patience=1000)
DESK_SLICE_SIZE = 64


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()}, {k: np.zeros_like(a) for k, a in tensors.items()})


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_step: int = 0
    best_val_mae: float = float("nan")
    baseline_val_mae: float = float("nan")
    stopped_early: bool = False
    config_echo: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json_dict(self) -> dict:
        # wall time is left out so that reports of identical runs are byte-identical
        d = asdict(self)
        d.pop("wall_time_s")
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Normalisation


def minmax_normalize(x1, x2, y=None):
    """Map the joint range of ``x1`` and ``x2`` to [0, 1]; ``y`` uses the same map.

    Returns the normalised arrays plus ``(lo, span)`` so callers can invert
    the map. A zero span yields all-zero outputs.
    """
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    lo = min(x1.min(), x2.min())
    hi = max(x1.max(), x2.max())
    span = hi - lo
    if span == 0:
        zero = np.zeros_like(x1)
        out = [zero, np.zeros_like(x2)] + ([np.zeros_like(np.asarray(y))] if y is not None else [])
        return out, (lo, span)
    out = [(x1 - lo) / span, (x2 - lo) / span]
    if y is not None:
        out.append((np.asarray(y) - lo) / span)
    return out, (lo, span)


def minmax_normalize_triplet(t: SlabTriplet) -> SlabTriplet:
    (a, b, c), _ = minmax_normalize(t.x1.pixels, t.x2.pixels, t.y.pixels)
    sp = t.x1.pixel_spacing
    return SlabTriplet(SliceImage(a, sp), SliceImage(b, sp), SliceImage(c, sp), t.d1_mm, t.d2_mm)


def _normalize_batch(x1, x2, y):
    x1 = x1.copy()
    x2 = x2.copy()
    y = y.copy()
    for i in range(x1.shape[0]):
        (x1[i], x2[i], y[i]), _ = minmax_normalize(x1[i], x2[i], y[i])
    return x1, x2, y


# ---------------------------------------------------------------------------
# Loss


def _sobel(imgs):
    """Sobel responses of ``(N, H, W)`` images with reflection padding.

    Written as smoothed central differences so that constant images give
    exactly zero.
    """
    p = np.pad(imgs, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    dx = p[:, :, 2:] - p[:, :, :-2]
    dy = p[:, 2:, :] - p[:, :-2, :]
    gx = dx[:, :-2] + 2 * dx[:, 1:-1] + dx[:, 2:]
    gy = dy[:, :, :-2] + 2 * dy[:, :, 1:-1] + dy[:, :, 2:]
    return gx, gy


def _sobel_adjoint(dgx, dgy):
    n, h, w = dgx.shape
    dp = np.zeros((n, h + 2, w + 2), dtype=dgx.dtype)
    for a in range(3):
        for b in range(3):
            if SOBEL_X[a, b]:
                dp[:, a : a + h, b : b + w] += SOBEL_X[a, b] * dgx
            if SOBEL_Y[a, b]:
                dp[:, a : a + h, b : b + w] += SOBEL_Y[a, b] * dgy
    # fold the reflected border back onto its source pixels
    dc = dp[:, :, 1:-1].copy()
    dc[:, :, 1] += dp[:, :, 0]
    dc[:, :, w - 2] += dp[:, :, w + 1]
    dr = dc[:, 1:-1, :].copy()
    dr[:, 1, :] += dc[:, 0, :]
    dr[:, h - 2, :] += dc[:, h + 1, :]
    return dr


def sobel_magnitude(img):
    """Per-pixel ``sqrt(Gx^2 + Gy^2)``; accepts a single-channel SliceImage or an ``(H, W)`` array."""
    if isinstance(img, SliceImage):
        if img.channels != 1:
            raise ShapeMismatch("sobel_magnitude expects a single-channel image")
        gx, gy = _sobel(img.pixels)
        return SliceImage(np.sqrt(gx * gx + gy * gy), img.pixel_spacing)
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    gx, gy = _sobel(arr[None] if squeeze else arr)
    mag = np.sqrt(gx * gx + gy * gy)
    return mag[0] if squeeze else mag


def batch_loss(pred: np.ndarray, target: np.ndarray, lam: float):
    """Mean over ``(N, H, W)`` of the intensity MAE plus ``lam`` times the Sobel-magnitude MAE.

    Returns ``(value, grad)`` with the subgradient of ``|.|`` taken as 0 at
    ties and the gradient of the magnitude taken as 0 where it vanishes.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} != {target.shape}")
    count = pred.size
    diff = pred - target
    value = float(np.abs(diff).mean(dtype=np.float64))
    grad = np.sign(diff) / count
    if lam:
        gx, gy = _sobel(pred)
        mag = np.sqrt(gx * gx + gy * gy)
        tx, ty = _sobel(target)
        tmag = np.sqrt(tx * tx + ty * ty)
        mdiff = mag - tmag
        value += lam * float(np.abs(mdiff).mean(dtype=np.float64))
        dmag = lam * np.sign(mdiff) / count
        safe = np.where(mag > 0, mag, 1)
        scale = np.where(mag > 0, dmag / safe, 0)
        grad = grad + _sobel_adjoint(scale * gx, scale * gy)
    return value, grad.astype(pred.dtype, copy=False)


def loss(pred, target, lam: float = 1.0):
    """Loss of a single predicted slice; returns ``(value, grad_wrt_pred)`` shaped like ``pred``."""
    if isinstance(pred, SliceImage):
        p, t = pred.pixels, target.pixels
    else:
        p, t = np.asarray(pred), np.asarray(target)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} != {t.shape}")
    if p.ndim == 3 and p.shape[0] != 1:
        raise ShapeMismatch("loss expects single-channel images")
    value, grad = batch_loss(p.reshape((1,) + p.shape[-2:]), t.reshape((1,) + t.shape[-2:]), lam)
    grad = grad.reshape(p.shape)
    if isinstance(pred, SliceImage):
        return value, SliceImage(grad, pred.pixel_spacing)
    return value, grad


# ---------------------------------------------------------------------------
# Optimiser


def adam_step(params, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. ``params`` may be NetworkParameters or a dict of arrays."""
    tensors = params.tensors if isinstance(params, NetworkParameters) else params
    if set(grads) != set(tensors):
        raise ShapeMismatch("gradient names do not match parameter names")
    step = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_t, new_m, new_v = {}, {}, {}
    for name, theta in tensors.items():
        g = grads[name]
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        dt = theta.dtype.type
        m = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = dt(b2) * state.v[name] + dt(1.0 - b2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.adam_eps))
        new_t[name] = theta - dt(cfg.learning_rate) * update
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(new_m, new_v, step)
    if isinstance(params, NetworkParameters):
        return NetworkParameters(params.config, new_t), new_state
    return new_t, new_state


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationSet:
    """Normalised triplets stacked as ``(V, H, W)`` arrays."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    def __len__(self):
        return self.x1.shape[0]

    @classmethod
    def from_triplets(cls, triplets) -> "ValidationSet":
        return cls(
            np.stack([t.x1.pixels[0] for t in triplets]),
            np.stack([t.x2.pixels[0] for t in triplets]),
            np.stack([t.y.pixels[0] for t in triplets]),
            np.array([t.d1_mm for t in triplets]),
            np.array([t.d2_mm for t in triplets]),
        )


def build_validation_set(label_pool, gen_cfg: GeneratorConfig, size: int, rng: np.random.Generator) -> ValidationSet:
    parts = []
    remaining = size
    while remaining > 0:
        batch = make_batch(label_pool, rng, gen_cfg)
        x1, x2, y, d1, d2 = batch.arrays()
        x1, x2, y = _normalize_batch(x1[:, 0], x2[:, 0], y[:, 0])
        take = min(remaining, len(batch))
        parts.append((x1[:take], x2[:take], y[:take], d1[:take], d2[:take]))
        remaining -= take
    return ValidationSet(*(np.concatenate(cols) for cols in zip(*parts)))


def validate(params: NetworkParameters, val_set, chunk: int = 32) -> float:
    """Mean over triplets of the intensity MAE between the clamped prediction and the target."""
    if not isinstance(val_set, ValidationSet):
        val_set = ValidationSet.from_triplets(list(val_set))
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    maes = []
    for s in range(0, len(val_set), chunk):
        sl = slice(s, s + chunk)
        pred = np.clip(predict_batch(params, val_set.x1[sl], val_set.x2[sl], val_set.d1[sl], val_set.d2[sl]), 0.0, 1.0)
        maes.append(np.abs(pred - val_set.y[sl]).mean(axis=(1, 2), dtype=np.float64))
    return float(np.concatenate(maes).mean())


def baseline_mae(val_set: ValidationSet) -> float:
    ylin = linear_interpolation(val_set.x1, val_set.x2, val_set.d1, val_set.d2)
    return float(np.abs(ylin - val_set.y).mean(axis=(1, 2), dtype=np.float64).mean())


# ---------------------------------------------------------------------------
# Training loop


def report_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + ".report.json")


def train_step(params, state, x1, x2, y, d1, d2, cfg: TrainConfig):
    """Forward, loss, backward and Adam update on an already normalised batch."""
    ylin = linear_interpolation(x1, x2, d1, d2)
    residual, cache = forward(params, network_input(x1, x2, d1, d2, params.dtype), train_mode=True)
    pred = ylin + residual[:, 0]
    value, grad = batch_loss(pred, y.astype(pred.dtype, copy=False), cfg.grad_loss_weight)
    grads, _ = backward(params, cache, grad[:, None])
    params, state = adam_step(params, grads, state, cfg)
    return params, state, value


def train(gen_cfg: GeneratorConfig, net_cfg: NetworkConfig, train_cfg: TrainConfig, label_pool, out_path,
          log_every: int = 50) -> TrainReport:
    """Train on freshly generated batches, keep the best-validation parameters and save them to ``out_path``."""
    if not label_pool:
        raise ValueError("label pool is empty")
    t0 = time.perf_counter()
    gen_cfg = replace(gen_cfg, batch_size=train_cfg.batch_size)
    init_seq, val_seq, data_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    params = init_network(net_cfg, np.random.default_rng(init_seq))
    val_set = build_validation_set(label_pool, gen_cfg, train_cfg.val_size, np.random.default_rng(val_seq))
    data_rng = np.random.default_rng(data_seq)

    report = TrainReport(config_echo={
        "generator": gen_cfg.to_dict(),
        "network": net_cfg.to_dict(),
        "training": train_cfg.to_dict(),
        "label_pool_size": len(label_pool),
    })
    report.baseline_val_mae = baseline_mae(val_set)
    best = validate(params, val_set)
    report.val_steps.append(0)
    report.val_mae.append(best)
    report.best_step, report.best_val_mae = 0, best
    best_params = params
    save_model(best_params, out_path)
    log.info("step 0: val MAE %.5f (linear baseline %.5f)", best, report.baseline_val_mae)

    state = AdamState.zeros_like(params.tensors)
    stale = 0
    for step in range(1, train_cfg.max_steps + 1):
        x1, x2, y, d1, d2 = make_batch(label_pool, data_rng, gen_cfg).arrays()
        x1, x2, y = _normalize_batch(x1[:, 0], x2[:, 0], y[:, 0])
        params, state, value = train_step(params, state, x1, x2, y, d1, d2, train_cfg)
        report.steps.append(step)
        report.train_loss.append(value)
        if step % log_every == 0:
            log.info("step %d: loss %.5f", step, float(np.mean(report.train_loss[-log_every:])))
        if step % train_cfg.val_interval == 0 or step == train_cfg.max_steps:
            mae = validate(params, val_set)
            report.val_steps.append(step)
            report.val_mae.append(mae)
            if mae < best:
                best, best_params, stale = mae, params, 0
                report.best_step, report.best_val_mae = step, mae
                save_model(best_params, out_path)
            else:
                stale += 1
            log.info("step %d: val MAE %.5f (best %.5f at %d)", step, mae, best, report.best_step)
            if stale >= train_cfg.patience:
                report.stopped_early = True
                break
    save_model(best_params, out_path)
    report.wall_time_s = time.perf_counter() - t0
    report.write(report_path(out_path))
    log.info("training finished in %.1f s", report.wall_time_s)
    return report
