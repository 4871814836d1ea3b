"""Connected-component refinement of lung masks and the padded lung box."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, GeometryError
from .volume_io import BinaryMask3D, CtVolume

log = logging.getLogger(__name__)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)

KEEP_FRACTION = 0.40
FALLBACK_FRACTION = 0.30
MIN_RETAINED_FRACTION = 0.65
DEFAULT_PADDING_MM = 25.0


def _arr(m) -> np.ndarray:
    return np.asarray(getattr(m, "voxels", m))


def _rewrap(like, voxels):
    if isinstance(like, BinaryMask3D):
        return BinaryMask3D(voxels, like.spacing, like.origin)
    return voxels.astype(np.uint8)


@dataclass(frozen=True)
class Component:
    label: int
    size: int


class Components:
    """Foreground partitioned into 26-connected components, largest first."""

    def __init__(self, mask):
        arr = _arr(mask).astype(bool)
        self.labels, n = ndimage.label(arr, structure=CONNECTIVITY_26)
        sizes = np.bincount(self.labels.ravel(), minlength=n + 1)[1:]
        order = sorted(range(n), key=lambda i: (-sizes[i], i))
        self.items = [Component(int(i + 1), int(sizes[i])) for i in order]

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i) -> Component:
        return self.items[i]

    @property
    def sizes(self) -> list[int]:
        return [c.size for c in self.items]

    def select(self, keep) -> np.ndarray:
        """Boolean mask of the given components."""
        return np.isin(self.labels, [c.label for c in keep])


def connected_components(mask) -> Components:
    return Components(mask)


@dataclass
class RefinementResult:
    mask: object
    fraction_used: float
    initial_voxels: int
    retained_voxels: int
    kept_sizes: list[int]
    warning: str | None = None


def refine_lung_mask_report(mask) -> RefinementResult:
    """Drop components smaller than 40% of the initial foreground. If what is
    left is under 65% of the initial foreground, start over at 30%. If even
    that removes everything, keep the largest component and flag a warning."""
    comps = Components(mask)
    total = sum(comps.sizes)
    if total == 0:
        raise EmptyMaskError("cannot refine an empty lung mask")

    warning = None
    fraction = KEEP_FRACTION
    keep = [c for c in comps if c.size >= fraction * total]
    if sum(c.size for c in keep) < MIN_RETAINED_FRACTION * total:
        fraction = FALLBACK_FRACTION
        keep = [c for c in comps if c.size >= fraction * total]
    if not keep:
        keep = [comps[0]]
        warning = (
            f"no component reached {FALLBACK_FRACTION:.0%} of {total} foreground voxels; "
            f"kept the largest ({comps[0].size} voxels)"
        )
        log.warning(warning)

    out = comps.select(keep)
    return RefinementResult(
        mask=_rewrap(mask, out),
        fraction_used=fraction,
        initial_voxels=total,
        retained_voxels=sum(c.size for c in keep),
        kept_sizes=[c.size for c in keep],
        warning=warning,
    )


def refine_lung_mask(mask):
    return refine_lung_mask_report(mask).mask


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel corners."""

    min_voxel: tuple[int, int, int]
    max_voxel: tuple[int, int, int]
    padding_mm: float = DEFAULT_PADDING_MM

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min_voxel, self.max_voxel)):
            raise GeometryError(f"box min {self.min_voxel} exceeds max {self.max_voxel}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.min_voxel, self.max_voxel))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.min_voxel, self.max_voxel))

    def fits(self, dims) -> bool:
        return all(lo >= 0 and hi < d for lo, hi, d in zip(self.min_voxel, self.max_voxel, dims))

    def to_dict(self):
        return {"min_voxel": list(self.min_voxel), "max_voxel": list(self.max_voxel), "padding_mm": self.padding_mm}


def padding_voxels(padding_mm: float, spacing) -> tuple[int, ...]:
    # round half up, per axis
    return tuple(int(np.floor(padding_mm / s + 0.5)) for s in spacing)


def bounding_box(mask, spacing=None, padding_mm: float = DEFAULT_PADDING_MM) -> BoundingBox:
    arr = _arr(mask).astype(bool)
    if spacing is None:
        spacing = getattr(mask, "spacing", (1.0, 1.0, 1.0))
    if not arr.any():
        raise EmptyMaskError("bounding box of an empty mask")
    pad = padding_voxels(padding_mm, spacing)
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(arr.any(axis=other))
        lo.append(max(0, int(idx[0]) - pad[axis]))
        hi.append(min(arr.shape[axis] - 1, int(idx[-1]) + pad[axis]))
    return BoundingBox(tuple(lo), tuple(hi), float(padding_mm))


def crop(obj, box: BoundingBox):
    """Copy of the sub-grid inside ``box``; spacing is unchanged."""
    arr = _arr(obj)
    if not box.fits(arr.shape):
        raise GeometryError(f"box {box.min_voxel}..{box.max_voxel} outside volume of dims {arr.shape}")
    sub = arr[box.slices].copy()
    if isinstance(obj, (CtVolume, BinaryMask3D)):
        origin = tuple(o + lo * s for o, lo, s in zip(obj.origin, box.min_voxel, obj.spacing))
        return type(obj)(sub, obj.spacing, origin)
    return sub


def uncrop_mask(mask_cropped, box: BoundingBox, original):
    """Paste a cropped mask into a zero field.

    ``original`` is either the original dims or a volume/mask on the original
    grid; in the latter case a BinaryMask3D with its geometry is returned.
    """
    dims = tuple(getattr(original, "dims", original))
    arr = _arr(mask_cropped)
    if tuple(arr.shape) != box.shape:
        raise GeometryError(f"cropped mask dims {arr.shape} != box dims {box.shape}")
    if not box.fits(dims):
        raise GeometryError(f"box does not fit in dims {dims}")
    out = np.zeros(dims, dtype=np.uint8)
    out[box.slices] = arr.astype(bool)
    if hasattr(original, "spacing"):
        return BinaryMask3D(out, original.spacing, original.origin)
    return out
