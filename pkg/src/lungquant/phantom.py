"""Synthetic chest CT phantoms with exact lung and lesion masks.

Body: elliptic cylinder of soft tissue spanning the full cranio-caudal range,
on an air background. Lungs: two ellipsoids of textured parenchyma with a few
small vessels. Lesions: ground-glass-like blobs inside the lungs, grown from
a smooth random field so that the lesion/lung voxel ratio hits the requested
fraction to within one voxel.

HU constants are chosen so lungs and lesions separate under both U-net
windows; they are not measured tissue values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import BinaryMask3D, CtVolume

AIR_HU = -1000.0
TISSUE_HU = 40.0
LUNG_HU = -830.0
VESSEL_HU = 30.0
LESION_HU_RANGE = (-600.0, -100.0)

DEFAULT_SHAPE = (64, 64, 40)
DEFAULT_SPACING = (5.5, 5.5, 8.0)


@dataclass
class Phantom:
    volume: CtVolume
    lung: BinaryMask3D
    lesion: BinaryMask3D
    target_fraction: float
    seed: int

    @property
    def lesion_percentage(self) -> float:
        return 100.0 * self.lesion.count / self.lung.count


def _ellipsoid(grid, center, semi):
    return sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, semi)) <= 1.0


def generate_phantom(
    seed: int,
    lesion_fraction_target: float = 0.0,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    vessels_per_lung: int = 4,
) -> Phantom:
    if not 0.0 <= lesion_fraction_target < 1.0:
        raise ValueError(f"lesion fraction must lie in [0, 1), got {lesion_fraction_target}")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    X, Y, Z = shape
    grid = np.meshgrid(*(np.arange(n, dtype=np.float32) for n in shape), indexing="ij")
    jitter = lambda: 1.0 + rng.uniform(-0.06, 0.06)  # noqa: E731

    cx, cy, cz = (X - 1) / 2, (Y - 1) / 2, (Z - 1) / 2
    body = ((grid[0] - cx) / (0.42 * X * jitter())) ** 2 + ((grid[1] - cy) / (0.36 * Y * jitter())) ** 2 <= 1.0

    lung = np.zeros(shape, dtype=bool)
    for side in (-1, 1):
        center = (cx + side * 0.19 * X * jitter(), cy + rng.uniform(-0.02, 0.02) * Y, cz + rng.uniform(-0.03, 0.03) * Z)
        semi = (0.13 * X * jitter(), 0.22 * Y * jitter(), 0.37 * Z * jitter())
        lung |= _ellipsoid(grid, center, semi)
    lung &= body

    vol = np.where(body, TISSUE_HU, AIR_HU).astype(np.float32)
    vol += rng.normal(0.0, 12.0, shape).astype(np.float32)
    vol[lung] = LUNG_HU + rng.normal(0.0, 25.0, int(lung.sum()))

    lung_idx = np.argwhere(lung)
    for _ in range(2 * vessels_per_lung):
        c = lung_idx[rng.integers(len(lung_idx))]
        ball = _ellipsoid(grid, c, (1.2, 1.2, 1.2)) & lung
        vol[ball] = VESSEL_HU + rng.normal(0.0, 15.0, int(ball.sum()))

    lesion = np.zeros(shape, dtype=bool)
    n_lung = int(lung.sum())
    k = int(round(lesion_fraction_target * n_lung))
    if k >= n_lung:
        raise ValueError(f"lesion fraction {lesion_fraction_target} leaves no healthy lung voxels")
    if k > 0:
        field = ndimage.gaussian_filter(rng.normal(size=shape), sigma=2.5)
        vals = field[lung]
        order = np.argsort(vals, kind="stable")[::-1][:k]
        flat = np.flatnonzero(lung.ravel())[order]
        lesion.ravel()[flat] = True
        # denser cores where the field peaks
        v = vals[order]
        u = (v - v.min()) / (np.ptp(v) + 1e-12)
        lo, hi = LESION_HU_RANGE
        hu = lo + 50.0 + (hi - lo - 100.0) * u + rng.normal(0.0, 20.0, k)
        vol.ravel()[flat] = np.clip(hu, lo, hi)

    return Phantom(
        volume=CtVolume(vol, spacing),
        lung=BinaryMask3D(lung, spacing),
        lesion=BinaryMask3D(lesion, spacing),
        target_fraction=float(lesion_fraction_target),
        seed=int(seed),
    )


# two lesion fractions per CT-SS class, away from the class boundaries
CLASS_SPANNING_FRACTIONS = (0.0, 0.02, 0.12, 0.18, 0.32, 0.42, 0.58, 0.68, 0.82, 0.9)
