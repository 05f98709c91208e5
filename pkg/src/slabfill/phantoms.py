"""Procedural brain-like label volumes for training and benchmarking.

Real 1 mm segmentations are not shipped with the package; these phantoms
give the generator folded cortex, white matter, ventricles and deep grey
nuclei with random shapes so that slice imputation has curved, moving
boundaries to learn from.
"""
from __future__ import annotations

import numpy as np

from .volgrid import LabelVolume, VoxelGeometry

BACKGROUND, CSF, CORTEX, WHITE_MATTER, VENTRICLE = 0, 1, 2, 3, 4
THALAMUS, CAUDATE, PUTAMEN, HIPPOCAMPUS = 5, 6, 7, 8
LABELS = (BACKGROUND, CSF, CORTEX, WHITE_MATTER, VENTRICLE, THALAMUS, CAUDATE, PUTAMEN, HIPPOCAMPUS)


def _folding(rng, pts, n_waves, freq_range):
    out = np.zeros(pts.shape[1:])
    for _ in range(n_waves):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(*freq_range)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(freq * np.tensordot(direction, pts, axes=1) + phase)
    return out / np.sqrt(n_waves)


def _ellipsoid(pts, center, radii):
    c = np.asarray(center)[:, None, None, None]
    r = np.asarray(radii)[:, None, None, None]
    return np.sum(((pts - c) / r) ** 2, axis=0)


def make_phantom(seed: int, dims=(72, 64, 72)) -> LabelVolume:
    """Random hemisphere-pair phantom at 1 mm isotropic resolution."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in dims]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"))
    half = np.asarray(dims, dtype=np.float64) / 2.0

    radii = half * rng.uniform(0.78, 0.9, size=3)
    rho = np.sqrt(_ellipsoid(pts, (0, 0, 0), radii))
    gyri = _folding(rng, pts, 12, (0.35, 0.6))
    outer = rho < 1.0 + 0.05 * gyri
    cortex_depth = rng.uniform(0.12, 0.18)
    inner = rho < 1.0 - cortex_depth + 0.09 * gyri

    vol = np.zeros(dims, dtype=np.uint8)
    vol[rho < 1.08] = CSF
    vol[outer] = CORTEX
    vol[inner] = WHITE_MATTER
    # interhemispheric fissure
    fissure = np.abs(pts[0] + rng.uniform(-1.5, 1.5)) < 1.2
    vol[fissure & (pts[2] > -radii[2] * 0.1) & outer] = CSF

    def blob(label, center, r, where=None):
        m = _ellipsoid(pts, center, r) < 1.0
        if where is not None:
            m &= where
        vol[m] = label

    jitter = lambda scale: rng.uniform(-scale, scale, size=3)  # noqa: E731
    for side in (-1, 1):
        s = np.array([side, 1, 1])
        blob(VENTRICLE, s * (radii * [0.16, 0.05, 0.12]) + jitter(1.5), radii * [0.07, 0.42, 0.1] * rng.uniform(1.2, 1.7, 3))
        blob(CAUDATE, s * (radii * [0.26, 0.2, 0.2]) + jitter(1.0), radii * [0.07, 0.18, 0.1] * rng.uniform(1.2, 1.7, 3))
        blob(PUTAMEN, s * (radii * [0.42, 0.05, 0.0]) + jitter(1.0), radii * [0.07, 0.2, 0.16] * rng.uniform(1.2, 1.7, 3))
        blob(THALAMUS, s * (radii * [0.14, -0.18, -0.02]) + jitter(1.0), radii * [0.1, 0.14, 0.12] * rng.uniform(1.2, 1.7, 3))
        blob(HIPPOCAMPUS, s * (radii * [0.38, -0.3, -0.35]) + jitter(1.0), radii * [0.06, 0.22, 0.07] * rng.uniform(1.2, 1.7, 3))
    return LabelVolume(VoxelGeometry(dims, (1.0, 1.0, 1.0)), vol)
