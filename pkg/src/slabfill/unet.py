"""Residual slice-imputation U-Net with hand-written reverse-mode gradients.

The network maps a 4-channel input ``[x1, x2, d1, d2]`` (two bounding
slices and two constant distance maps in mm) to a single-channel residual
that is added to the linear interpolation of ``x1`` and ``x2``.

Layout of the architecture for ``levels = L`` and ``base_channels = b``:

* encoder level ``i``: two units to ``b * 2**i`` channels, then 2x2 max-pool
* bottleneck: two units to ``b * 2**L`` channels
* decoder level ``i``: 2x bilinear upsampling, concatenation with the
  encoder output of level ``i``, two units to ``b * 2**i`` channels
* head: 1x1 convolution to one channel

A unit is GroupNorm -> 3x3 convolution (padding 1) -> LeakyReLU.

Arrays are NCHW at the public surface; internally activations are NHWC so
that convolutions become a single matrix product over im2col columns.
"""
from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    DegenerateDistances,
    IoFailure,
    ShapeMismatch,
    ShapeMismatchWithConfig,
    ShapeNotDivisible,
    StaleCache,
    VersionMismatch,
)
from .volgrid import SliceImage

GN_EPS = 1e-5
MAGIC = b"SLABFILL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 64
    in_channels: int = 4
    out_channels: int = 1
    group_norm_groups: int = 8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.group_norm_groups < 1:
            raise ConfigError("levels, base_channels and group_norm_groups must be positive")
        if self.in_channels != 4 or self.out_channels != 1:
            raise ConfigError("the imputation network has 4 input channels and 1 output channel")
        if not math.isfinite(self.leaky_slope) or self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be a non-negative real")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.levels

    @property
    def divisor(self) -> int:
        return 2**self.levels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _groups_for(channels: int, requested: int, first: bool) -> int:
    # The raw input holds two constant distance maps; per-channel groups
    # would normalise them to zero, so the first unit uses a single group.
    if first:
        return 1
    return math.gcd(requested, channels)


def unit_specs(config: NetworkConfig) -> list[tuple[str, int, int, int]]:
    """``(name, in_channels, out_channels, groups)`` for every conv unit, in forward order."""
    b, L, g = config.base_channels, config.levels, config.group_norm_groups
    specs = []
    cin = config.in_channels
    for i in range(L):
        cout = b * 2**i
        specs.append((f"enc{i}.0", cin, cout, _groups_for(cin, g, i == 0)))
        specs.append((f"enc{i}.1", cout, cout, _groups_for(cout, g, False)))
        cin = cout
    cout = b * 2**L
    specs.append(("bott.0", cin, cout, _groups_for(cin, g, False)))
    specs.append(("bott.1", cout, cout, _groups_for(cout, g, False)))
    for i in reversed(range(L)):
        skip = b * 2**i
        cin = b * 2 ** (i + 1) + skip
        specs.append((f"dec{i}.0", cin, skip, _groups_for(cin, g, False)))
        specs.append((f"dec{i}.1", skip, skip, _groups_for(skip, g, False)))
    return specs


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Canonical ordered mapping of tensor names to shapes."""
    shapes = {}
    for name, cin, cout, _ in unit_specs(config):
        shapes[f"{name}.gn.scale"] = (cin,)
        shapes[f"{name}.gn.offset"] = (cin,)
        shapes[f"{name}.conv.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv.bias"] = (cout,)
    shapes["head.weight"] = (config.out_channels, config.base_channels, 1, 1)
    shapes["head.bias"] = (config.out_channels,)
    return shapes


@dataclass(eq=False)
class NetworkParameters:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ShapeMismatchWithConfig("tensor names do not match the configured architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatchWithConfig(f"{name}: shape {self.tensors[name].shape}, config expects {shape}")

    @property
    def dtype(self):
        return self.tensors["head.bias"].dtype

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def fingerprint(self) -> int:
        crc = 0
        for v in self.tensors.values():
            crc = zlib.crc32(np.ascontiguousarray(v).view(np.uint8), crc)
        return crc

    def __eq__(self, other):
        return (
            isinstance(other, NetworkParameters)
            and self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


def init_network(config: NetworkConfig, rng: np.random.Generator, dtype=np.float32) -> NetworkParameters:
    """He-uniform kernels, zero biases, unit norm scales and a zero head.

    The zero head makes the fresh network output an exactly zero residual,
    so imputation starts at the linear-interpolation baseline.
    """
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.startswith("head."):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith("conv.weight"):
            bound = math.sqrt(6.0 / (shape[1] * 9))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith("gn.scale"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkParameters(config, tensors)


# ---------------------------------------------------------------------------
# Layer primitives (NHWC)


def _im2col(z):
    n, h, w, c = z.shape
    zp = np.zeros((n, h + 2, w + 2, c), dtype=z.dtype)
    zp[:, 1:-1, 1:-1] = z
    cols = np.empty((n, h, w, 9, c), dtype=z.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, :, k, :] = zp[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols, shape):
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dzp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dzp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
    return dzp[:, 1:-1, 1:-1]


def _kernel_matrix(weight):
    cout, cin = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def _group_norm(x, scale, offset, groups):
    n, h, w, c = x.shape
    xg = x.reshape(n, h, w, groups, c // groups)
    mean = xg.mean(axis=(1, 2, 4), keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (centered * inv).reshape(n, h, w, c)
    return xhat * scale + offset, xhat, inv


def _group_norm_backward(dy, xhat, inv, scale, groups):
    n, h, w, c = dy.shape
    dscale = np.einsum("nhwc,nhwc->c", dy, xhat)
    doffset = dy.sum(axis=(0, 1, 2))
    dxhat = (dy * scale).reshape(n, h, w, groups, c // groups)
    xh = xhat.reshape(n, h, w, groups, c // groups)
    m = h * w * (c // groups)
    s1 = dxhat.sum(axis=(1, 2, 4), keepdims=True)
    s2 = (dxhat * xh).sum(axis=(1, 2, 4), keepdims=True)
    dx = inv * (dxhat - s1 / m - xh * (s2 / m))
    return dx.reshape(n, h, w, c), dscale, doffset


def _maxpool(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(dy, arg):
    n, h2, w2, c = dy.shape
    dwin = np.zeros((n, h2, w2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def upsample_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` half-pixel bilinear interpolation weights with edge clamping."""
    m = np.zeros((2 * n, n))
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    rows = np.arange(2 * n)
    m[rows, i0] += 1.0 - f
    m[rows, i1] += f
    return m


def _upsample(x, uh, uw):
    out = np.einsum("ah,nhwc->nawc", uh, x, optimize=True)
    return np.einsum("bw,nawc->nabc", uw, out, optimize=True)


def _upsample_backward(dy, uh, uw):
    d = np.einsum("bw,nabc->nawc", uw, dy, optimize=True)
    return np.einsum("ah,nawc->nhwc", uh, d, optimize=True)


# ---------------------------------------------------------------------------
# Network


class ForwardCache:
    """Activations stored by a train-mode forward pass."""

    def __init__(self, fingerprint: int):
        self.fingerprint = fingerprint
        self.units: dict[str, tuple] = {}
        self.pools: dict[int, tuple] = {}
        self.ups: dict[int, tuple] = {}
        self.head_in = None
        self.input_shape = None


def _unit_forward(params, spec, x, slope, cache):
    name, cin, cout, groups = spec
    t = params.tensors
    z, xhat, inv = _group_norm(x, t[f"{name}.gn.scale"], t[f"{name}.gn.offset"], groups)
    cols = _im2col(z)
    n, h, w, _ = x.shape
    pre = (cols @ _kernel_matrix(t[f"{name}.conv.weight"]) + t[f"{name}.conv.bias"]).reshape(n, h, w, cout)
    out = np.where(pre > 0, pre, pre * slope)
    if cache is not None:
        cache.units[name] = (xhat, inv, cols, pre > 0, x.shape)
    return out


def _unit_backward(params, spec, dout, slope, cache, grads):
    name, cin, cout, groups = spec
    t = params.tensors
    xhat, inv, cols, positive, shape = cache.units[name]
    dpre = np.where(positive, dout, dout * slope).reshape(-1, cout)
    kmat = _kernel_matrix(t[f"{name}.conv.weight"])
    dk = cols.T @ dpre
    grads[f"{name}.conv.weight"] = dk.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    grads[f"{name}.conv.bias"] = dpre.sum(axis=0)
    dz = _col2im(dpre @ kmat.T, shape)
    dx, dscale, doffset = _group_norm_backward(dz, xhat, inv, t[f"{name}.gn.scale"], groups)
    grads[f"{name}.gn.scale"] = dscale
    grads[f"{name}.gn.offset"] = doffset
    return dx


def forward(params: NetworkParameters, inputs: np.ndarray, train_mode: bool = False):
    """Evaluate the residual ``S_theta`` for a batch ``(N, 4, H, W)``.

    Returns ``(residuals, cache)`` where residuals are ``(N, 1, H, W)`` and
    ``cache`` is ``None`` unless ``train_mode`` is set.
    """
    cfg = params.config
    inputs = np.asarray(inputs)
    if inputs.ndim != 4 or inputs.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"expected (N, {cfg.in_channels}, H, W) input, got {inputs.shape}")
    h, w = inputs.shape[2:]
    if h % cfg.divisor or w % cfg.divisor or h == 0 or w == 0:
        raise ShapeNotDivisible(f"spatial shape {h}x{w} not divisible by {cfg.divisor}")
    dtype = params.dtype
    cache = ForwardCache(params.fingerprint()) if train_mode else None
    if cache is not None:
        cache.input_shape = inputs.shape
    specs = iter(unit_specs(cfg))
    slope = dtype.type(cfg.leaky_slope)
    x = np.ascontiguousarray(inputs.transpose(0, 2, 3, 1), dtype=dtype)
    skips = []
    for i in range(cfg.levels):
        x = _unit_forward(params, next(specs), x, slope, cache)
        x = _unit_forward(params, next(specs), x, slope, cache)
        skips.append(x)
        x, arg = _maxpool(x)
        if cache is not None:
            cache.pools[i] = arg
    x = _unit_forward(params, next(specs), x, slope, cache)
    x = _unit_forward(params, next(specs), x, slope, cache)
    for i in reversed(range(cfg.levels)):
        uh = upsample_matrix(x.shape[1]).astype(dtype)
        uw = upsample_matrix(x.shape[2]).astype(dtype)
        up = _upsample(x, uh, uw)
        if cache is not None:
            cache.ups[i] = (uh, uw, up.shape[-1])
        x = np.concatenate([up, skips[i]], axis=-1)
        x = _unit_forward(params, next(specs), x, slope, cache)
        x = _unit_forward(params, next(specs), x, slope, cache)
    t = params.tensors
    head = t["head.weight"].reshape(cfg.out_channels, cfg.base_channels).T
    n = x.shape[0]
    out = (x.reshape(-1, cfg.base_channels) @ head + t["head.bias"]).reshape(n, h, w, cfg.out_channels)
    if cache is not None:
        cache.head_in = x
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def backward(params: NetworkParameters, cache: ForwardCache, output_grad: np.ndarray):
    """Reverse-mode gradients of ``sum(residuals * output_grad)``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is ordered like
    ``params.tensors`` and ``input_grad`` has the input's NCHW shape.
    """
    if cache is None:
        raise StaleCache("backward requires a cache from a train-mode forward pass")
    if cache.fingerprint != params.fingerprint():
        raise StaleCache("parameters differ from those used in the forward pass")
    cfg = params.config
    dtype = params.dtype
    slope = dtype.type(cfg.leaky_slope)
    t = params.tensors
    n, _, h, w = cache.input_shape
    g = np.asarray(output_grad, dtype=dtype)
    if g.shape != (n, cfg.out_channels, h, w):
        raise ShapeMismatch(f"output_grad shape {g.shape} does not match residual shape {(n, cfg.out_channels, h, w)}")
    grads: dict[str, np.ndarray] = {}
    gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cfg.out_channels)
    x = cache.head_in
    grads["head.weight"] = (x.reshape(-1, cfg.base_channels).T @ gh).T.reshape(cfg.out_channels, cfg.base_channels, 1, 1)
    grads["head.bias"] = gh.sum(axis=0)
    dx = (gh @ t["head.weight"].reshape(cfg.out_channels, cfg.base_channels)).reshape(x.shape)

    specs = unit_specs(cfg)
    by_name = {s[0]: s for s in specs}
    dskips = {}
    for i in range(cfg.levels):
        dx = _unit_backward(params, by_name[f"dec{i}.1"], dx, slope, cache, grads)
        dx = _unit_backward(params, by_name[f"dec{i}.0"], dx, slope, cache, grads)
        uh, uw, c_up = cache.ups[i]
        dskips[i] = dx[..., c_up:]
        dx = _upsample_backward(np.ascontiguousarray(dx[..., :c_up]), uh, uw)
    dx = _unit_backward(params, by_name["bott.1"], dx, slope, cache, grads)
    dx = _unit_backward(params, by_name["bott.0"], dx, slope, cache, grads)
    for i in reversed(range(cfg.levels)):
        dx = _maxpool_backward(dx, cache.pools[i]) + dskips[i]
        dx = _unit_backward(params, by_name[f"enc{i}.1"], dx, slope, cache, grads)
        dx = _unit_backward(params, by_name[f"enc{i}.0"], dx, slope, cache, grads)
    ordered = {k: np.asarray(grads[k], dtype=dtype).reshape(v.shape) for k, v in t.items()}
    return ordered, np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Residual imputation


def _as_plane(img) -> np.ndarray:
    if isinstance(img, SliceImage):
        if img.channels != 1:
            raise ShapeMismatch("imputation operates on single-channel slices")
        return img.pixels[0]
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def _check_distances(d1, d2):
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if np.any(d1 < 0) or np.any(d2 < 0):
        raise DegenerateDistances("distances must be non-negative")
    if np.any(d1 + d2 <= 0):
        raise DegenerateDistances("d1 + d2 must be positive")
    return d1, d2


def linear_interpolation(x1, x2, d1, d2):
    """``(d2/d) * x1 + (d1/d) * x2`` with ``d = d1 + d2``.

    Accepts :class:`SliceImage` objects (returns one) or arrays with a
    leading batch axis, in which case ``d1`` and ``d2`` may be per-item.
    """
    if isinstance(x1, SliceImage) or isinstance(x2, SliceImage):
        if not (isinstance(x1, SliceImage) and isinstance(x2, SliceImage)):
            raise TypeError("x1 and x2 must both be SliceImage or both arrays")
        if x1.pixels.shape != x2.pixels.shape:
            raise ShapeMismatch(f"{x1.pixels.shape} != {x2.pixels.shape}")
        out = linear_interpolation(x1.pixels, x2.pixels, d1, d2)
        return SliceImage(out, x1.pixel_spacing)
    a = np.asarray(x1)
    b = np.asarray(x2)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    d1, d2 = _check_distances(d1, d2)
    d = d1 + d2
    w1 = d2 / d
    w2 = d1 / d
    if w1.ndim:
        w1 = w1.reshape(w1.shape + (1,) * (a.ndim - w1.ndim))
        w2 = w2.reshape(w2.shape + (1,) * (a.ndim - w2.ndim))
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    return (w1 * a + w2 * b).astype(dtype, copy=False)


def network_input(x1, x2, d1, d2, dtype=np.float32) -> np.ndarray:
    """Stack ``(N, H, W)`` slices and per-item distances into ``(N, 4, H, W)``."""
    x1 = np.asarray(x1)
    n = x1.shape[0]
    d1 = np.broadcast_to(np.asarray(d1, dtype=np.float64), (n,))
    d2 = np.broadcast_to(np.asarray(d2, dtype=np.float64), (n,))
    out = np.empty((n, 4) + x1.shape[1:], dtype=dtype)
    out[:, 0] = x1
    out[:, 1] = x2
    out[:, 2] = d1[:, None, None]
    out[:, 3] = d2[:, None, None]
    return out


def _pad_to(arr, divisor):
    h, w = arr.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if not ph and not pw:
        return arr, None
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "symmetric"
    if ph > h or pw > w:
        mode = "edge"
    return np.pad(arr, pad, mode=mode), (h, w)


def predict_batch(params: NetworkParameters, x1, x2, d1, d2) -> np.ndarray:
    """Unclamped ``y_lin + S_theta`` for ``(N, H, W)`` slices; pads internally when needed."""
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ShapeMismatch(f"{x1.shape} != {x2.shape}")
    ylin = linear_interpolation(x1, x2, d1, d2)
    a, crop = _pad_to(x1, params.config.divisor)
    b, _ = _pad_to(x2, params.config.divisor)
    residual, _ = forward(params, network_input(a, b, d1, d2, params.dtype))
    residual = residual[:, 0]
    if crop is not None:
        residual = residual[:, : crop[0], : crop[1]]
    return ylin + residual.astype(ylin.dtype, copy=False)


def impute_slice(params: NetworkParameters, x1, x2, d1: float, d2: float, clamp: bool = True):
    """Impute the slice between ``x1`` and ``x2`` at distances ``d1`` / ``d2``.

    Inputs are expected to be jointly min-max normalized already. Returns a
    :class:`SliceImage` when given slice images, otherwise a 2D array.
    """
    spacing = x1.pixel_spacing if isinstance(x1, SliceImage) else None
    a = _as_plane(x1)
    b = _as_plane(x2)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    _check_distances(d1, d2)
    out = predict_batch(params, a[None], b[None], [d1], [d2])[0]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return SliceImage(out, spacing) if spacing is not None else out


# ---------------------------------------------------------------------------
# Serialization


def save_model(params: NetworkParameters, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name, arr in params.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path) -> NetworkParameters:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise BadMagic(f"{path} is not a model file")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ShapeMismatchWithConfig("model file is truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    (n,) = take("<I")
    try:
        config = NetworkConfig.from_dict(json.loads(raw[pos : pos + n]))
    except (ValueError, ConfigError) as exc:
        raise ShapeMismatchWithConfig(f"unreadable network config: {exc}") from exc
    pos += n
    expected = parameter_shapes(config)
    tensors = {}
    for exp_name, exp_shape in expected.items():
        (ln,) = take("<I")
        name = raw[pos : pos + ln].decode(errors="replace")
        pos += ln
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        if name != exp_name or tuple(shape) != exp_shape:
            raise ShapeMismatchWithConfig(f"tensor {name}{tuple(shape)} does not match config ({exp_name}{exp_shape})")
        count = int(np.prod(shape))
        if pos + 4 * count > len(raw):
            raise ShapeMismatchWithConfig("model file is truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise ShapeMismatchWithConfig("trailing data after the last tensor")
    return NetworkParameters(config, tensors)
