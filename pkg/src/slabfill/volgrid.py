"""Volumetric data model, trilinear sampling and a strict NIfTI-1 subset.

Axis convention for every 3D grid: axis 0 is left-right, axis 1 is
posterior-anterior (the slab stacking direction) and axis 2 is
inferior-superior. Coordinates in mm are measured in the volume's own frame
with voxel (0, 0, 0) at the origin, so ``mm = index * spacing``.

Coronal slices are stored as ``(channels, height, width)`` arrays where
height runs along axis 0 and width along axis 2 of the source volume.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IoFailure,
    MalformedHeader,
    OutOfBounds,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
)

log = logging.getLogger(__name__)

AP_AXIS = 1

DT_UINT8 = 2
DT_FLOAT32 = 16
HEADER_SIZE = 348
VOX_OFFSET = 352


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, order="C", copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VoxelGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ap_axis: int = AP_AXIS

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.ap_axis not in (0, 1, 2):
            raise ValueError(f"ap_axis must be 0, 1 or 2, got {self.ap_axis}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ap_extent_mm(self) -> float:
        return (self.dims[self.ap_axis] - 1) * self.spacing[self.ap_axis]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    geometry: VoxelGeometry
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if not np.issubdtype(vox.dtype, np.integer):
            if not np.all(np.equal(np.mod(vox, 1), 0)):
                raise ValueError("label voxels must be integers")
            vox = vox.astype(np.int32)
        if vox.shape != self.geometry.dims:
            raise ShapeMismatch(f"voxel array {vox.shape} != dims {self.geometry.dims}")
        if vox.size and vox.min() < 0:
            raise ValueError("label IDs must be non-negative")
        object.__setattr__(self, "voxels", _frozen(vox))

    @property
    def labels(self) -> np.ndarray:
        return np.unique(self.voxels)

    def __eq__(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.geometry == other.geometry
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Channel-major intensity grid, ``voxels.shape == (channels, *dims)``."""

    geometry: VoxelGeometry
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if not np.issubdtype(vox.dtype, np.floating):
            vox = vox.astype(np.float64)
        if vox.ndim == 3:
            vox = vox[None]
        if vox.ndim != 4 or vox.shape[1:] != self.geometry.dims:
            raise ShapeMismatch(f"voxel array {vox.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("intensity voxels must be finite")
        object.__setattr__(self, "voxels", _frozen(vox))

    @property
    def channels(self) -> int:
        return self.voxels.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, IntensityVolume)
            and self.geometry == other.geometry
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class SliceImage:
    """A 2D image of shape ``(channels, height, width)``."""

    pixels: np.ndarray
    pixel_spacing: tuple[float, float] = field(default=(1.0, 1.0))

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ShapeMismatch(f"slice pixels must be (channels, height, width), got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("slice pixels must be finite")
        sp = tuple(float(s) for s in self.pixel_spacing)
        if len(sp) != 2 or not all(s > 0 for s in sp):
            raise ValueError(f"pixel_spacing must be two positive reals, got {self.pixel_spacing}")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "pixel_spacing", sp)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return (
            isinstance(other, SliceImage)
            and self.pixel_spacing == other.pixel_spacing
            and self.pixels.dtype == other.pixels.dtype
            and np.array_equal(self.pixels, other.pixels)
        )


# ---------------------------------------------------------------------------
# Sampling


def sample_points(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a 3D array at ``coords`` (shape ``(3, ...)``, voxel units).

    Points must lie in ``[0, dims - 1]`` on every axis. At integer coordinates
    the stored value is returned exactly, since the interpolation weights are
    then exactly 0 or 1.
    """
    coords = np.asarray(coords, dtype=np.float64)
    dims = grid.shape
    for ax in range(3):
        c = coords[ax]
        if c.size and (c.min() < 0 or c.max() > dims[ax] - 1):
            raise OutOfBounds(f"coordinate outside [0, {dims[ax] - 1}] on axis {ax}")
    lo, frac, hi = [], [], []
    for ax in range(3):
        i0 = np.minimum(np.floor(coords[ax]).astype(np.intp), max(dims[ax] - 2, 0))
        lo.append(i0)
        hi.append(np.minimum(i0 + 1, dims[ax] - 1))
        frac.append(coords[ax] - i0)
    out = 0.0
    for corner in range(8):
        w = 1.0
        idx = []
        for ax in range(3):
            if (corner >> ax) & 1:
                w = w * frac[ax]
                idx.append(hi[ax])
            else:
                w = w * (1.0 - frac[ax])
                idx.append(lo[ax])
        out = out + w * grid[tuple(idx)]
    return out


def trilinear_sample(vol: IntensityVolume, coord, channel: int = 0) -> float:
    coord = np.asarray(coord, dtype=np.float64).reshape(3)
    return float(sample_points(vol.voxels[channel], coord))


def extract_coronal_slice(vol: IntensityVolume, ap_mm: float) -> SliceImage:
    """Sample the plane perpendicular to the AP axis at ``ap_mm``."""
    geom = vol.geometry
    if not (0.0 <= ap_mm <= geom.ap_extent_mm):
        raise OutOfBounds(f"ap_mm={ap_mm} outside [0, {geom.ap_extent_mm}]")
    nx, _, nz = geom.dims
    ap = ap_mm / geom.spacing[AP_AXIS]
    ii, kk = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(nz, dtype=np.float64), indexing="ij")
    coords = np.stack([ii, np.full_like(ii, ap), kk])
    pixels = np.stack([sample_points(vol.voxels[c], coords) for c in range(vol.channels)])
    return SliceImage(pixels.astype(vol.voxels.dtype, copy=False), (geom.spacing[0], geom.spacing[2]))


def stack_coronal(slices, geometry: VoxelGeometry) -> IntensityVolume:
    """Assemble ``(C, H, W)`` slices along the AP axis."""
    arr = np.stack([s.pixels if isinstance(s, SliceImage) else s for s in slices], axis=2)
    return IntensityVolume(geometry, arr)


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, little endian, uint8 / float32 only)

_HDR = struct.Struct(
    "<i10s18sihbb"  # sizeof_hdr .. dim_info                       0..40
    "8h"  # dim                                                    40
    "3f"  # intent_p1..3                                           56
    "hhhh"  # intent_code, datatype, bitpix, slice_start           68
    "8f"  # pixdim                                                 76
    "fff"  # vox_offset, scl_slope, scl_inter                      108
    "hbb"  # slice_end, slice_code, xyzt_units                     120
    "ffff"  # cal_max, cal_min, slice_duration, toffset            124
    "ii"  # glmax, glmin                                           140
    "80s24s"  # descrip, aux_file                                  148
    "hh"  # qform_code, sform_code                                 252
    "6f"  # quatern_b..qoffset_z                                   256
    "12f"  # srow_x, srow_y, srow_z                                280
    "16s4s"  # intent_name, magic                                  328
)
assert _HDR.size == HEADER_SIZE


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"file shorter than a NIfTI-1 header ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise MalformedHeader("big-endian NIfTI files are not supported")
        raise MalformedHeader(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    f = _HDR.unpack_from(raw, 0)
    hdr = {
        "dim": f[7:15],
        "datatype": f[19],
        "bitpix": f[20],
        "pixdim": f[22:30],
        "vox_offset": f[30],
        "scl_slope": f[31],
        "scl_inter": f[32],
        "qform_code": f[44],
        "sform_code": f[45],
        "srow": np.array(f[52:64], dtype=np.float64).reshape(3, 4),
        "magic": f[65],
    }
    if hdr["magic"] != b"n+1\x00":
        raise MalformedHeader(f"magic {hdr['magic']!r} is not single-file 'n+1'")
    return hdr


def read_nifti(path, kind: str | None = None):
    """Read a NIfTI-1 file as a :class:`LabelVolume` or :class:`IntensityVolume`.

    ``kind`` is ``"label"``, ``"intensity"`` or ``None``; the default picks
    labels for uint8 data and intensities for float32 data. Reading uint8 data
    as intensities divides by 255.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    hdr = _parse_header(raw)
    dim = hdr["dim"]
    if dim[0] not in (3, 4):
        raise MalformedHeader(f"dim[0]={dim[0]}; only 3D or 4D volumes are supported")
    dims = tuple(int(d) for d in dim[1:4])
    channels = int(dim[4]) if dim[0] == 4 else 1
    if min(dims) < 1 or channels < 1:
        raise MalformedHeader(f"non-positive dimensions {dim}")
    dtype = {DT_UINT8: np.dtype("u1"), DT_FLOAT32: np.dtype("<f4")}.get(hdr["datatype"])
    if dtype is None:
        raise UnsupportedDatatype(f"datatype code {hdr['datatype']} (only 2 and 16 are supported)")
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise MalformedHeader(f"vox_offset {hdr['vox_offset']} inside the header")
    count = int(np.prod(dims)) * channels
    if len(raw) - offset < count * dtype.itemsize:
        raise TruncatedData(f"expected {count} voxels after offset {offset}, file has {len(raw)} bytes")
    if hdr["qform_code"] > 0:
        log.warning("%s: qform orientation ignored", path)
    if hdr["sform_code"] > 0:
        lin = hdr["srow"][:, :3]
        if np.any(lin != np.diag(np.diag(lin))):
            log.warning("%s: non-diagonal sform ignored", path)

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(dims + (channels,), order="F").transpose(3, 0, 1, 2)
    pix = [abs(float(p)) if p else 1.0 for p in hdr["pixdim"][1:4]]
    geom = VoxelGeometry(dims, tuple(pix))

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    # identity scaling (1, 0) is skipped so that -0.0 and integer labels survive unchanged
    scaled = slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0)
    if scaled and not np.isfinite(inter):
        inter = 0.0
    if kind is None:
        kind = "label" if dtype == np.uint8 and not scaled else "intensity"
    if kind == "label":
        if channels != 1:
            raise MalformedHeader("label volumes must have one channel")
        vox = data[0]
        if scaled:
            vox = vox * slope + inter
        if dtype != np.uint8 or scaled:
            if not np.all(np.mod(vox, 1) == 0) or vox.min() < 0:
                raise UnsupportedDatatype("data cannot be read as non-negative integer labels")
            vox = vox.astype(np.int32)
        return LabelVolume(geom, np.array(vox))
    if kind != "intensity":
        raise ValueError(f"kind must be 'label', 'intensity' or None, got {kind!r}")
    if dtype == np.uint8:
        vox = data.astype(np.float32)
        if scaled:
            vox = vox * np.float32(slope) + np.float32(inter)
        else:
            vox = vox / np.float32(255.0)
    else:
        vox = data.astype(np.float32)
        if scaled:
            vox = vox * np.float32(slope) + np.float32(inter)
    return IntensityVolume(geom, vox)


def _build_header(geom: VoxelGeometry, channels: int, datatype: int, bitpix: int) -> bytes:
    dim = [4 if channels > 1 else 3, *geom.dims, channels, 1, 1, 1]
    pixdim = [1.0, *geom.spacing, 0.0, 0.0, 0.0, 0.0]
    sx, sy, sz = geom.spacing
    srow = [sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0]
    return _HDR.pack(
        HEADER_SIZE, b"", b"", 0, 0, b"r"[0], 0,
        *dim,
        0.0, 0.0, 0.0,
        0, datatype, bitpix, 0,
        *pixdim,
        float(VOX_OFFSET), 0.0, 0.0,
        0, 0, 2,  # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"slabfill", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *srow,
        b"", b"n+1\x00",
    )


def write_nifti(vol, path) -> None:
    """Write labels as uint8 and intensities as float32, single-file NIfTI-1."""
    if isinstance(vol, LabelVolume):
        if vol.voxels.size and vol.voxels.max() > 255:
            raise UnsupportedDatatype("label IDs above 255 cannot be stored as uint8")
        data = vol.voxels.astype(np.uint8)[None]
        header = _build_header(vol.geometry, 1, DT_UINT8, 8)
    elif isinstance(vol, IntensityVolume):
        data = vol.voxels.astype("<f4")
        header = _build_header(vol.geometry, vol.channels, DT_FLOAT32, 32)
    else:
        raise TypeError(f"cannot write {type(vol).__name__} as NIfTI")
    payload = data.transpose(1, 2, 3, 0).tobytes(order="F")
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(header)
            fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
