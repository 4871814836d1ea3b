"""Intensity windowing and grid resampling ahead of each U-net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .volume_io import BinaryMask3D, CtVolume


@dataclass(frozen=True)
class HuWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window needs lo < hi, got [{self.lo}, {self.hi}]")

    def to_list(self):
        return [float(self.lo), float(self.hi)]


LUNG_WINDOW = HuWindow(-1000.0, 1000.0)
LESION_WINDOW = HuWindow(-1000.0, 300.0)

DEFAULT_INPUT_DIMS = (200, 150, 100)


def window_and_normalize(vol, w: HuWindow):
    """Clip to ``[w.lo, w.hi]`` and map affinely onto [0, 1].

    Accepts a CtVolume (returns a CtVolume) or a bare array.
    """
    arr = vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol, dtype=np.float32)
    out = (np.clip(arr, w.lo, w.hi) - w.lo) / (w.hi - w.lo)
    out = out.astype(np.float32)
    if isinstance(vol, CtVolume):
        return vol.with_voxels(out)
    return out


def resample_array(arr: np.ndarray, target_dims, order: int) -> np.ndarray:
    """Resample so that voxel edges (not centres) of the two grids line up."""
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != arr.ndim or min(target_dims) < 1:
        raise GeometryError(f"invalid target dims {target_dims} for array of shape {arr.shape}")
    if tuple(arr.shape) == target_dims:
        return arr.copy()
    factors = [t / s for t, s in zip(target_dims, arr.shape)]
    if order == 0:
        src = arr.astype(np.uint8) if arr.dtype == bool else arr
    else:
        src = arr.astype(np.float32)
    out = ndimage.zoom(src, factors, order=order, mode="nearest", grid_mode=True)
    if out.shape != target_dims:  # guard against float rounding in zoom's shape rule
        raise GeometryError(f"resample produced {out.shape}, wanted {target_dims}")
    return out


def _scaled_spacing(spacing, src_dims, target_dims):
    return tuple(s * d / t for s, d, t in zip(spacing, src_dims, target_dims))


def resample(obj, target_dims):
    """Resample a CtVolume (trilinear) or BinaryMask3D (nearest) to ``target_dims``.

    Spacing is rescaled so the physical extent dims * spacing is unchanged.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if isinstance(obj, BinaryMask3D):
        vox = resample_array(obj.voxels, target_dims, order=0)
        return BinaryMask3D(vox, _scaled_spacing(obj.spacing, obj.dims, target_dims), obj.origin)
    if isinstance(obj, CtVolume):
        vox = resample_array(obj.voxels, target_dims, order=1)
        return CtVolume(vox, _scaled_spacing(obj.spacing, obj.dims, target_dims), obj.origin)
    raise TypeError(f"expected CtVolume or BinaryMask3D, got {type(obj).__name__}")


def resample_mask_to_original(mask: BinaryMask3D, reference) -> BinaryMask3D:
    """Map a mask from a resampled grid back onto ``reference``'s grid."""
    vox = resample_array(mask.voxels, reference.dims, order=0)
    return BinaryMask3D(vox, reference.spacing, reference.origin)
