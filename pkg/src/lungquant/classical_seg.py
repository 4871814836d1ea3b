"""Classical (non-learned) lung segmentation used to build reference masks.

Steps: HU windowing, a rough Otsu segmentation of the central coronal slice
to find the cranio-caudal lung range, a stack of rough axial segmentations
as the seed, a region-based (morphological Chan-Vese) contour evolution, and a 3D
morphological closing to fill vessels and airway walls.

Works well on lungs without lesions; dense lesions are pushed outside the
contour because they look like the surrounding tissue.
"""

from __future__ import annotations

import logging
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, StageError
from .preprocess import LUNG_WINDOW, HuWindow
from .volume_io import BinaryMask3D, CtVolume

log = logging.getLogger(__name__)

N_BINS = 256
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def otsu_threshold(slice_2d, n_bins: int = N_BINS) -> float:
    """Threshold maximising the between-class variance of a 256-bin histogram.

    Returns the upper edge of the last bin assigned to the low class, so
    ``values <= t`` recovers that class up to bin quantisation.
    """
    values = np.asarray(slice_2d, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if lo == hi:
        raise ValueError("Otsu threshold is undefined on a constant image")
    hist, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    # Bin centres are an affine map of the bin index, which leaves the argmax
    # unchanged; integer indices let runs of empty bins tie exactly.
    n = int(values.size)
    total = int(np.dot(hist, np.arange(n_bins)))
    n0 = np.cumsum(hist)[:-1].tolist()
    s0 = np.cumsum(hist * np.arange(n_bins))[:-1].tolist()
    best, k = Fraction(-1), 0
    for i, (a, s) in enumerate(zip(n0, s0)):
        score = Fraction((n * s - total * a) ** 2, a * (n - a)) if 0 < a < n else Fraction(0)
        if score > best:
            best, k = score, i
    return float(edges[k + 1])


def _clear_border(mask, border_axes):
    labels, _ = ndimage.label(mask, structure=EIGHT_CONNECTED)
    touching = set()
    for axis in border_axes:
        for end in (0, -1):
            touching.update(np.unique(np.take(labels, end, axis=axis)).tolist())
    touching.discard(0)
    if touching:
        mask = mask & ~np.isin(labels, list(touching))
    return mask


def rough_lung_2d(slice_2d, window: HuWindow = LUNG_WINDOW, border_axes=(0, 1)) -> np.ndarray:
    """Air-like region below the Otsu threshold, minus components touching
    the image border along ``border_axes``."""
    s = np.clip(np.asarray(slice_2d, dtype=np.float32), window.lo, window.hi)
    if s.min() == s.max():
        return np.zeros(s.shape, dtype=np.uint8)
    t = otsu_threshold(s)
    dark = s <= t
    return _clear_border(dark, border_axes).astype(np.uint8)


def _arr(vol):
    return vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol, dtype=np.float32)


def axial_extent(vol, window: HuWindow = LUNG_WINDOW) -> tuple[int, int]:
    """(z_min, z_max) of the rough lung silhouette on the central coronal slice.

    Only the left/right image borders are cleared here: the outside air
    reaches them, while lungs may legitimately run off the top or bottom of
    the scan.
    """
    arr = _arr(vol)
    coronal = arr[:, arr.shape[1] // 2, :]
    rough = rough_lung_2d(coronal, window, border_axes=(0,))
    zs = np.flatnonzero(rough.any(axis=0))
    if zs.size == 0:
        raise EmptyMaskError("no lung found on the central coronal slice")
    return int(zs[0]), int(zs[-1])


def seed_mask_3d(vol, window: HuWindow = LUNG_WINDOW, extent=None) -> np.ndarray:
    arr = _arr(vol)
    z0, z1 = extent if extent is not None else axial_extent(arr, window)
    seed = np.zeros(arr.shape, dtype=np.uint8)
    for z in range(z0, z1 + 1):
        seed[:, :, z] = rough_lung_2d(arr[:, :, z], window)
    return seed


def _planes_3d():
    """The nine 3x3x3 planar elements of the morphological curvature operator."""
    planes = [np.zeros((3, 3, 3), dtype=bool) for _ in range(9)]
    planes[0][:, :, 1] = True
    planes[1][:, 1, :] = True
    planes[2][1, :, :] = True
    i, r = [0, 1, 2], [2, 1, 0]
    planes[3][:, i, i] = True
    planes[4][:, i, r] = True
    planes[5][i, :, i] = True
    planes[6][i, :, r] = True
    planes[7][i, i, :] = True
    planes[8][i, r, :] = True
    return planes


PLANES_3D = _planes_3d()


def _sup_inf(u):
    return np.max([ndimage.binary_erosion(u, p) for p in PLANES_3D], axis=0)


def _inf_sup(u):
    return np.min([ndimage.binary_dilation(u, p) for p in PLANES_3D], axis=0)


def chan_vese_step(image, mask, smoothing: int = 1, phase: int = 0):
    """One morphological Chan-Vese step: move the boundary towards the closer
    region mean, then ``smoothing`` curvature passes alternating SI.IS and
    IS.SI starting from ``phase``."""
    u = mask.astype(np.int8)
    c_out = image[u == 0].mean() if (u == 0).any() else 0.0
    c_in = image[u == 1].mean()
    edge = np.abs(np.gradient(u.astype(np.float32))).sum(axis=0)
    aux = edge * ((image - c_in) ** 2 - (image - c_out) ** 2)
    u[aux < 0] = 1
    u[aux > 0] = 0
    u = u.astype(bool)
    for k in range(smoothing):
        u = _sup_inf(_inf_sup(u)) if (phase + k) % 2 == 0 else _inf_sup(_sup_inf(u))
    return u


def active_contour_segment(image, seed, iterations: int = 100, smoothing: int = 1, tol: float = 1e-3) -> np.ndarray:
    """Morphological Chan-Vese evolution from ``seed``.

    ``image`` should be windowed to [0, 1]. Stops after ``iterations`` steps
    or once at most ``tol`` of the mask voxels differ from either of the two
    previous masks (the alternating smoothing can settle into a two-step
    cycle).
    """
    img = np.asarray(image, dtype=np.float64)
    mask = np.asarray(seed).astype(bool)
    if img.ndim != 3 or img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and seed {mask.shape} must be matching 3D grids")
    if not mask.any():
        raise EmptyMaskError("active contour needs a non-empty seed")
    before = None
    phase = 0
    for it in range(iterations):
        new = chan_vese_step(img, mask, smoothing, phase)
        phase += smoothing
        if not new.any():
            raise EmptyMaskError(f"level set collapsed to an empty mask at iteration {it}")
        limit = tol * np.count_nonzero(new)
        settled = np.count_nonzero(new != mask) <= limit or (
            before is not None and np.count_nonzero(new != before) <= limit
        )
        before, mask = mask, new
        if settled:
            break
    return mask.astype(np.uint8)


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (g**2).sum(axis=0) <= r * r


def morphological_close_3d(mask, radius_voxels: int = 3) -> np.ndarray:
    """Dilation then erosion with a ball, computed on a padded grid so that
    objects touching the volume border are not eroded away."""
    arr = np.asarray(getattr(mask, "voxels", mask)).astype(bool)
    r = int(radius_voxels)
    if r <= 0:
        return arr.astype(np.uint8)
    padded = np.pad(arr, r)
    se = ball(r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return closed[r:-r, r:-r, r:-r].astype(np.uint8)


def classical_lung_segmentation(vol: CtVolume, iterations: int = 100, close_radius: int = 3):
    """Full classical pipeline; failures are raised as StageError."""
    arr = _arr(vol)
    stage = "window"
    try:
        win = np.clip(arr, LUNG_WINDOW.lo, LUNG_WINDOW.hi)
        normed = (win - LUNG_WINDOW.lo) / (LUNG_WINDOW.hi - LUNG_WINDOW.lo)
        stage = "axial_extent"
        extent = axial_extent(win)
        stage = "seed"
        seed = seed_mask_3d(win, extent=extent)
        if not seed.any():
            raise EmptyMaskError("seed mask is empty")
        stage = "active_contour"
        mask = active_contour_segment(normed, seed, iterations)
        stage = "closing"
        mask = morphological_close_3d(mask, close_radius)
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    if isinstance(vol, CtVolume):
        return BinaryMask3D(mask, vol.spacing, vol.origin)
    return mask
