"""Load and store CT volumes and binary masks as NIfTI-1 files.

Arrays are held in canonical (RAS+) axis order: axis 0 runs left-right,
axis 1 posterior-anterior and axis 2 inferior-superior (cranio-caudal).
Axial slices are therefore ``voxels[:, :, k]`` and coronal slices
``voxels[:, j, :]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import GeometryError, VolumeFormatError, UnsupportedBitDepthError

log = logging.getLogger(__name__)

Spacing = tuple[float, float, float]


def _check_geometry(voxels: np.ndarray, spacing) -> Spacing:
    if voxels.ndim != 3:
        raise GeometryError(f"expected a 3D grid, got shape {voxels.shape}")
    if min(voxels.shape) < 1:
        raise GeometryError(f"all dims must be >= 1, got {voxels.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise GeometryError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


@dataclass
class CtVolume:
    """CT intensities in Hounsfield units with per-axis spacing in mm."""

    voxels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = _check_geometry(self.voxels, self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if not np.isfinite(self.voxels).all():
            raise VolumeFormatError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0

    def affine(self) -> np.ndarray:
        return _affine(self.spacing, self.origin)

    def with_voxels(self, voxels, spacing=None) -> "CtVolume":
        return replace(self, voxels=voxels, spacing=spacing or self.spacing)


@dataclass
class BinaryMask3D:
    """Binary {0, 1} grid paired with a CtVolume (same dims and spacing)."""

    voxels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.dtype != bool:
            values = np.unique(arr)
            if not np.isin(values, (0, 1)).all():
                raise GeometryError(f"mask values must be 0 or 1, found {values[:10]}")
        self.voxels = arr.astype(np.uint8)
        self.spacing = _check_geometry(self.voxels, self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @classmethod
    def like(cls, voxels, ref) -> "BinaryMask3D":
        """Wrap ``voxels`` with the geometry of ``ref``."""
        return cls(np.asarray(voxels).astype(bool), ref.spacing, ref.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def affine(self) -> np.ndarray:
        return _affine(self.spacing, self.origin)


def _affine(spacing, origin) -> np.ndarray:
    aff = np.diag([*spacing, 1.0])
    aff[:3, 3] = origin
    return aff


def check_paired(vol, mask) -> None:
    """Raise GeometryError unless ``mask`` lies on the grid of ``vol``."""
    if tuple(vol.dims) != tuple(mask.dims):
        raise GeometryError(f"dims differ: {vol.dims} vs {mask.dims}")
    if not np.allclose(vol.spacing, mask.spacing, rtol=1e-5):
        raise GeometryError(f"spacing differs: {vol.spacing} vs {mask.spacing}")


def _read(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeFormatError(f"cannot parse NIfTI file {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise VolumeFormatError(f"{path} is not a NIfTI image")
    if img.ndim == 4 and img.shape[3] == 1:
        img = img.slicer[..., 0]
    if img.ndim != 3:
        raise VolumeFormatError(f"{path}: expected 3D data, got shape {img.shape}")
    return nib.as_closest_canonical(img)


def _geometry(img) -> tuple[Spacing, tuple[float, float, float]]:
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in img.affine[:3, 3])
    return spacing, origin


def load_volume(path) -> CtVolume:
    """Read a CT volume in HU. Header scale/intercept are applied.

    8-bit intensity data is rejected with UnsupportedBitDepthError: such files
    have been windowed to a display range and no longer carry Hounsfield units.
    """
    img = _read(path)
    dtype = img.header.get_data_dtype()
    if dtype.itemsize == 1:
        raise UnsupportedBitDepthError(f"{path}: 8-bit intensity data ({dtype}) is not usable as HU")
    try:
        data = img.get_fdata(dtype=np.float32)
    except Exception as exc:
        raise VolumeFormatError(f"cannot read voxel data from {path}: {exc}") from exc
    spacing, origin = _geometry(img)
    return CtVolume(data, spacing, origin)


def load_mask(path, binarize: bool = True) -> BinaryMask3D:
    """Read a mask. Label maps (e.g. separate left/right lung labels) are
    collapsed to {0, 1} unless ``binarize`` is False."""
    img = _read(path)
    data = np.asanyarray(img.dataobj)
    if binarize:
        if data.max(initial=0) > 1:
            log.debug("collapsing label map %s to binary", path)
        data = data > 0
    spacing, origin = _geometry(img)
    return BinaryMask3D(data, spacing, origin)


def _write(img, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeFormatError(f"cannot write {path}: {exc}") from exc


def save_volume(vol: CtVolume, path) -> None:
    img = nib.Nifti1Image(np.asarray(vol.voxels, dtype=np.float32), vol.affine())
    img.header.set_xyzt_units("mm")
    _write(img, path)


def save_mask(mask: BinaryMask3D, path) -> None:
    img = nib.Nifti1Image(np.asarray(mask.voxels, dtype=np.uint8), mask.affine())
    img.header.set_data_dtype(np.uint8)
    img.header.set_xyzt_units("mm")
    _write(img, path)
