"""Domain-randomized generator of synthetic volumes and slab triplets.

A training sample is produced in two stages. First a label volume is
deformed (random affine plus a smooth nonlinear field whose control grid is
denser along the AP axis) and rendered with a random Gaussian mixture, then
gamma-skewed and modulated by a smooth multiplicative illumination field.
Second, the synthetic volume is digitally slabbed: two coronal planes ``d``
mm apart and one plane inside the slab form a :class:`SlabTriplet`.

All randomness comes from an explicit ``numpy.random.Generator``; the
generator is a pure function of (label pool, seed, config).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, ShapeMismatch, VolumeTooSmall
from .volgrid import (
    AP_AXIS,
    IntensityVolume,
    LabelVolume,
    SliceImage,
    VoxelGeometry,
    extract_coronal_slice,
)


@dataclass
class GeneratorConfig:
    rotation_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_max: float = 0.1
    translation_max_mm: float = 10.0
    nonlin_cp_spacing_inplane_mm: float = 20.0
    nonlin_cp_spacing_ap_mm: float = 10.0
    nonlin_std_mm: float = 3.0
    gmm_mean_range: tuple[float, float] = (0.1, 0.9)
    gmm_std_range: tuple[float, float] = (0.02, 0.12)
    gamma_log_range: tuple[float, float] = (-0.3, 0.3)
    bias_log_amplitude: float = 0.3
    bias_cp_spacing_inplane_mm: float = 40.0
    bias_cp_spacing_ap_mm: float = 12.0
    thickness_min_mm: int = 2
    thickness_max_mm: int = 12
    batch_size: int = 32
    slice_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "gmm_mean_range", "gmm_std_range", "gamma_log_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(f"generator config: {msg}")

        for name in ("scale_range", "gmm_mean_range", "gmm_std_range", "gamma_log_range"):
            lo, hi = getattr(self, name)
            need(lo <= hi, f"{name} must be ordered, got {(lo, hi)}")
        need(self.scale_range[0] > 0, "scales must be positive")
        need(self.gmm_std_range[0] >= 0, "GMM standard deviations must be non-negative")
        need(min(self.rotation_max_deg, self.shear_max, self.translation_max_mm) >= 0,
             "rotation, shear and translation bounds must be non-negative")
        need(self.nonlin_std_mm >= 0 and self.bias_log_amplitude >= 0, "noise amplitudes must be non-negative")
        need(self.nonlin_cp_spacing_ap_mm > 0 and self.bias_cp_spacing_ap_mm > 0, "control spacings must be positive")
        need(self.nonlin_cp_spacing_ap_mm < self.nonlin_cp_spacing_inplane_mm,
             "nonlinear control spacing along AP must be finer than in-plane")
        need(self.bias_cp_spacing_ap_mm < self.bias_cp_spacing_inplane_mm,
             "bias control spacing along AP must be finer than in-plane")
        need(int(self.thickness_min_mm) == self.thickness_min_mm and int(self.thickness_max_mm) == self.thickness_max_mm,
             "slab thicknesses are integers (mm)")
        need(self.thickness_min_mm >= 2, "thickness_min_mm must be >= 2")
        need(self.thickness_min_mm <= self.thickness_max_mm, "thickness range must be ordered")
        need(self.batch_size >= 1, "batch_size must be positive")
        need(self.slice_size >= 16 and self.slice_size % 16 == 0, "slice_size must be a positive multiple of 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class DeformationField:
    geometry: VoxelGeometry
    displacement: np.ndarray  # (3, *dims), mm
    control: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.displacement.shape != (3, *self.geometry.dims):
            raise ShapeMismatch(f"displacement {self.displacement.shape} vs dims {self.geometry.dims}")


@dataclass(frozen=True)
class SlabTriplet:
    x1: SliceImage
    x2: SliceImage
    y: SliceImage
    d1_mm: float
    d2_mm: float

    @property
    def thickness_mm(self) -> float:
        return self.d1_mm + self.d2_mm


@dataclass(frozen=True)
class Batch:
    triplets: list

    def __len__(self):
        return len(self.triplets)

    def arrays(self):
        """Stack into ``x1, x2, y`` of shape ``(N, C, H, W)`` and ``d1, d2`` of shape ``(N,)``."""
        x1 = np.stack([t.x1.pixels for t in self.triplets])
        x2 = np.stack([t.x2.pixels for t in self.triplets])
        y = np.stack([t.y.pixels for t in self.triplets])
        d1 = np.array([t.d1_mm for t in self.triplets], dtype=np.float64)
        d2 = np.array([t.d2_mm for t in self.triplets], dtype=np.float64)
        return x1, x2, y, d1, d2


# ---------------------------------------------------------------------------
# Geometry


def sample_affine_params(rng: np.random.Generator, cfg: GeneratorConfig) -> dict:
    """Draw the raw affine parameters in a fixed order."""
    return {
        "rotation_deg": rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg, size=3),
        "scale": rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3),
        "shear": rng.uniform(-cfg.shear_max, cfg.shear_max, size=3),
        "translation_mm": rng.uniform(-cfg.translation_max_mm, cfg.translation_max_mm, size=3),
    }


def compose_affine(rotation_deg, scale, shear, translation_mm) -> np.ndarray:
    """4x4 matrix ``T @ R @ Sh @ S`` with rotations applied about axes 0, 1, 2 in turn."""
    ax, ay, az = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    s01, s02, s12 = shear
    sh = np.array([[1.0, s01, s02], [0.0, 1.0, s12], [0.0, 0.0, 1.0]])
    out = np.eye(4)
    out[:3, :3] = rz @ ry @ rx @ sh @ np.diag(np.asarray(scale, dtype=np.float64))
    out[:3, 3] = translation_mm
    return out


def sample_affine(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    return compose_affine(**sample_affine_params(rng, cfg))


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights mapping ``n_in`` evenly spread control values onto ``n_out`` samples."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / max(n_out - 1, 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    f = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


def upsample_control_grid(control: np.ndarray, dims) -> np.ndarray:
    """Trilinearly upsample ``(..., n0, n1, n2)`` control values onto a ``dims`` grid.

    The control grid spans the volume exactly: its first and last points sit
    on the first and last voxels of each axis.
    """
    out = control
    for ax in range(3):
        m = _interp_matrix(dims[ax], control.shape[control.ndim - 3 + ax])
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [out.ndim - 3 + ax])), 0, out.ndim - 3 + ax)
    return out


def control_grid_shape(geometry: VoxelGeometry, inplane_mm: float, ap_mm: float) -> tuple[int, int, int]:
    shape = []
    for ax in range(3):
        extent = (geometry.dims[ax] - 1) * geometry.spacing[ax]
        step = ap_mm if ax == geometry.ap_axis else inplane_mm
        shape.append(max(2, int(math.ceil(extent / step)) + 1) if geometry.dims[ax] > 1 else 1)
    return tuple(shape)


def sample_deformation(rng: np.random.Generator, geometry: VoxelGeometry, cfg: GeneratorConfig) -> DeformationField:
    shape = control_grid_shape(geometry, cfg.nonlin_cp_spacing_inplane_mm, cfg.nonlin_cp_spacing_ap_mm)
    control = rng.normal(0.0, cfg.nonlin_std_mm, size=(3, *shape)) if cfg.nonlin_std_mm > 0 else np.zeros((3, *shape))
    disp = upsample_control_grid(control, geometry.dims)
    return DeformationField(geometry, disp, control)


def _voxel_mm_grid(geometry: VoxelGeometry) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(geometry.dims, geometry.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def deform_labels(labels: LabelVolume, affine: np.ndarray, field: DeformationField) -> LabelVolume:
    """Warp labels by ``affine`` (a forward map in mm about the volume centre) plus ``field``.

    Each output voxel pulls its label from ``affine^-1(p) + field(p)`` with
    nearest-neighbour lookup; points falling outside the source become 0.
    """
    geom = labels.geometry
    if field.geometry.dims != geom.dims:
        raise ShapeMismatch("deformation field and labels disagree on dims")
    spacing = np.asarray(geom.spacing)[:, None, None, None]
    center = ((np.asarray(geom.dims) - 1) * np.asarray(geom.spacing)) / 2.0
    inv = np.linalg.inv(np.asarray(affine, dtype=np.float64))
    pts = _voxel_mm_grid(geom) - center[:, None, None, None]
    src = np.tensordot(inv[:3, :3], pts, axes=1) + inv[:3, 3][:, None, None, None]
    src += center[:, None, None, None] + field.displacement
    idx = np.floor(src / spacing + 0.5).astype(np.intp)
    inside = np.ones(geom.dims, dtype=bool)
    for ax in range(3):
        inside &= (idx[ax] >= 0) & (idx[ax] < geom.dims[ax])
        np.clip(idx[ax], 0, geom.dims[ax] - 1, out=idx[ax])
    out = labels.voxels[idx[0], idx[1], idx[2]]
    out = np.where(inside, out, 0).astype(labels.voxels.dtype)
    return LabelVolume(geom, out)


# ---------------------------------------------------------------------------
# Appearance


def gmm_synthesize(labels: LabelVolume, rng: np.random.Generator, cfg: GeneratorConfig) -> IntensityVolume:
    ids = np.unique(labels.voxels)
    means = rng.uniform(cfg.gmm_mean_range[0], cfg.gmm_mean_range[1], size=ids.size)
    stds = rng.uniform(cfg.gmm_std_range[0], cfg.gmm_std_range[1], size=ids.size)
    lut = np.searchsorted(ids, labels.voxels)
    noise = rng.standard_normal(size=labels.voxels.shape, dtype=np.float32)
    img = means.astype(np.float32)[lut] + stds.astype(np.float32)[lut] * noise
    np.clip(img, 0.0, 1.0, out=img)
    return IntensityVolume(labels.geometry, img[None])


def gamma_augment(vol: IntensityVolume, rng: np.random.Generator, cfg: GeneratorConfig) -> IntensityVolume:
    log_gamma = rng.uniform(cfg.gamma_log_range[0], cfg.gamma_log_range[1])
    if log_gamma == 0.0:
        return vol
    gamma = math.exp(log_gamma)
    return IntensityVolume(vol.geometry, np.power(vol.voxels, vol.voxels.dtype.type(gamma)))


def sample_bias_field(rng: np.random.Generator, geometry: VoxelGeometry, cfg: GeneratorConfig) -> np.ndarray:
    """Smooth log-illumination field on the full grid."""
    shape = control_grid_shape(geometry, cfg.bias_cp_spacing_inplane_mm, cfg.bias_cp_spacing_ap_mm)
    if cfg.bias_log_amplitude == 0:
        return np.zeros(geometry.dims)
    control = rng.normal(0.0, cfg.bias_log_amplitude, size=shape)
    return upsample_control_grid(control, geometry.dims)


def apply_bias_field(vol: IntensityVolume, rng: np.random.Generator, cfg: GeneratorConfig) -> IntensityVolume:
    if cfg.bias_log_amplitude == 0:
        return vol
    log_field = sample_bias_field(rng, vol.geometry, cfg)
    out = vol.voxels * np.exp(log_field).astype(vol.voxels.dtype)[None]
    np.clip(out, 0.0, 1.0, out=out)
    return IntensityVolume(vol.geometry, out)


def synthesize_volume(labels: LabelVolume, rng: np.random.Generator, cfg: GeneratorConfig):
    """Full 3D chain: affine, deformation, GMM, gamma, bias. Returns ``(image, deformed_labels)``."""
    affine = sample_affine(rng, cfg)
    field = sample_deformation(rng, labels.geometry, cfg)
    deformed = deform_labels(labels, affine, field)
    img = gmm_synthesize(deformed, rng, cfg)
    img = gamma_augment(img, rng, cfg)
    img = apply_bias_field(img, rng, cfg)
    return img, deformed


# ---------------------------------------------------------------------------
# Digital slabbing


def sample_triplet(vol: IntensityVolume, rng: np.random.Generator, cfg: GeneratorConfig) -> SlabTriplet:
    geom = vol.geometry
    extent = geom.ap_extent_mm
    height, width = geom.dims[0], geom.dims[2]
    if extent <= cfg.thickness_max_mm:
        raise VolumeTooSmall(f"AP extent {extent} mm must exceed the maximum thickness {cfg.thickness_max_mm} mm")
    if height < cfg.slice_size or width < cfg.slice_size:
        raise VolumeTooSmall(f"in-plane size {height}x{width} smaller than slice_size {cfg.slice_size}")
    d = int(rng.integers(cfg.thickness_min_mm, cfg.thickness_max_mm + 1))
    d1 = int(rng.integers(1, d))
    a = int(rng.integers(0, int(math.floor(extent - d)) + 1))
    r0 = int(rng.integers(0, height - cfg.slice_size + 1))
    c0 = int(rng.integers(0, width - cfg.slice_size + 1))
    window = (slice(None), slice(r0, r0 + cfg.slice_size), slice(c0, c0 + cfg.slice_size))

    def crop(ap):
        s = extract_coronal_slice(vol, float(ap))
        return SliceImage(s.pixels[window], s.pixel_spacing)

    return SlabTriplet(crop(a), crop(a + d), crop(a + d1), float(d1), float(d - d1))


def make_batch(label_pool, rng: np.random.Generator, cfg: GeneratorConfig) -> Batch:
    if not label_pool:
        raise ValueError("label pool is empty")
    labels = label_pool[int(rng.integers(len(label_pool)))]
    vol, _ = synthesize_volume(labels, rng, cfg)
    return Batch([sample_triplet(vol, rng, cfg) for _ in range(cfg.batch_size)])
