"""Turn a stack of coronal slices into an isotropic volume by slice imputation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

from .errors import ChannelMismatch, IoFailure, OutOfRange, ShapeMismatch
from .trainer import minmax_normalize
from .unet import NetworkParameters, impute_slice
from .volgrid import AP_AXIS, IntensityVolume, SliceImage, VoxelGeometry, read_nifti

log = logging.getLogger(__name__)

COINCIDENCE_TOL_MM = 1e-6
MAX_GAP_MM = 50.0
TRAINING_MAX_THICKNESS_MM = 12.0


class Passthrough(NamedTuple):
    index: int


class Bracket(NamedTuple):
    lower: int
    upper: int
    d1: float
    d2: float


Resolution = Union[Passthrough, Bracket]


@dataclass(frozen=True)
class ReconstructionStack:
    slices: tuple
    ap_coords_mm: tuple

    def __post_init__(self):
        slices = tuple(self.slices)
        coords = tuple(float(c) for c in self.ap_coords_mm)
        if len(slices) < 2:
            raise ValueError("a reconstruction stack needs at least two slices")
        if len(coords) != len(slices):
            raise ValueError(f"{len(slices)} slices but {len(coords)} coordinates")
        gaps = np.diff(coords)
        if np.any(gaps <= 0):
            raise ValueError("slice coordinates must be strictly increasing")
        if np.any(gaps > MAX_GAP_MM):
            raise ValueError(f"inter-slice gaps must not exceed {MAX_GAP_MM} mm")
        channels = {s.channels for s in slices}
        if len(channels) != 1:
            raise ChannelMismatch(f"slices disagree in channel count: {sorted(channels)}")
        if {s.pixels.shape[1:] for s in slices}.__len__() != 1:
            raise ShapeMismatch("slices must share a common in-plane shape")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "ap_coords_mm", coords)

    @property
    def channels(self) -> int:
        return self.slices[0].channels

    @classmethod
    def from_volume(cls, vol: IntensityVolume, ap_coords_mm=None) -> "ReconstructionStack":
        """Slices are the planes of ``vol`` along the AP axis; coordinates default to ``index * spacing``."""
        n = vol.geometry.dims[AP_AXIS]
        if ap_coords_mm is None:
            ap_coords_mm = [k * vol.geometry.spacing[AP_AXIS] for k in range(n)]
        spacing = (vol.geometry.spacing[0], vol.geometry.spacing[2])
        return cls(tuple(SliceImage(vol.voxels[:, :, k, :], spacing) for k in range(n)), tuple(ap_coords_mm))


@dataclass(frozen=True)
class ImputationPlan:
    target_coords_mm: tuple
    entries: tuple

    def __len__(self):
        return len(self.entries)


def bracket_slices(coords, t: float) -> Resolution:
    coords = np.asarray(coords, dtype=np.float64)
    near = np.flatnonzero(np.abs(coords - t) <= COINCIDENCE_TOL_MM)
    if near.size:
        return Passthrough(int(near[0]))
    if t < coords[0] or t > coords[-1]:
        raise OutOfRange(f"target {t} mm outside [{coords[0]}, {coords[-1]}] mm")
    j = int(np.searchsorted(coords, t, side="right"))
    i = j - 1
    return Bracket(i, j, float(t - coords[i]), float(coords[j] - t))


def plan(stack: ReconstructionStack, spacing_mm: float) -> ImputationPlan:
    if not spacing_mm > 0:
        raise ValueError("spacing_mm must be positive")
    first, last = stack.ap_coords_mm[0], stack.ap_coords_mm[-1]
    count = int(math.floor((last - first) / spacing_mm + 1e-9)) + 1
    targets = tuple(first + k * spacing_mm for k in range(count))
    entries = tuple(bracket_slices(stack.ap_coords_mm, t) for t in targets)
    return ImputationPlan(targets, entries)


def _impute_channel(params, a, b, d1, d2):
    (an, bn), (lo, span) = minmax_normalize(a, b)
    yhat = impute_slice(params, an, bn, d1, d2)
    out = lo + yhat.astype(np.float64) * span
    return np.clip(out, 0.0, 1.0)


def impute_volume(params: NetworkParameters, stack: ReconstructionStack, spacing_mm: float = 1.0) -> IntensityVolume:
    """Impute planes every ``spacing_mm`` between the first and last slice.

    Planes that coincide with an acquired slice are copied verbatim; all
    other planes are predicted channel by channel from their bracketing pair.
    """
    p = plan(stack, spacing_mm)
    dtype = stack.slices[0].pixels.dtype
    planes = []
    for t, entry in zip(p.target_coords_mm, p.entries):
        if isinstance(entry, Passthrough):
            planes.append(stack.slices[entry.index].pixels)
            continue
        if entry.d1 + entry.d2 > TRAINING_MAX_THICKNESS_MM:
            log.warning("target %.3f mm: bracket of %.2f mm is wider than the training range",
                        t, entry.d1 + entry.d2)
        lower = stack.slices[entry.lower].pixels
        upper = stack.slices[entry.upper].pixels
        planes.append(np.stack([
            _impute_channel(params, lower[c], upper[c], entry.d1, entry.d2) for c in range(stack.channels)
        ]).astype(dtype))
    h, w = stack.slices[0].pixels.shape[1:]
    sx, sz = stack.slices[0].pixel_spacing
    geom = VoxelGeometry((h, len(planes), w), (sx, spacing_mm, sz))
    return IntensityVolume(geom, np.stack(planes, axis=2))


def load_stack(nifti_path, coords_path=None) -> ReconstructionStack:
    """Read a stack volume plus an optional ``{"ap_coords_mm": [...]}`` sidecar."""
    vol = read_nifti(nifti_path, kind="intensity")
    coords = None
    if coords_path is not None:
        try:
            data = json.loads(Path(coords_path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read {coords_path}: {exc}") from exc
        if not isinstance(data, dict) or set(data) != {"ap_coords_mm"}:
            raise ValueError('coordinate sidecar must be {"ap_coords_mm": [...]}')
        coords = data["ap_coords_mm"]
        if len(coords) != vol.geometry.dims[AP_AXIS]:
            raise ValueError(f"sidecar lists {len(coords)} coordinates for {vol.geometry.dims[AP_AXIS]} slices")
    return ReconstructionStack.from_volume(vol, coords)
