"""Offline augmentation of (image, mask) training pairs.

Images are raw HU arrays, masks {0, 1} arrays, both in canonical axis order
(axes 0 and 1 span the axial plane, axis 2 is cranio-caudal). Geometric
transforms move image and mask together; noise and blur touch the image only.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

FILL_HU = -1000.0


@dataclass(frozen=True)
class AugmentationSpec:
    factor: int = 2
    zoom_factors: tuple[float, ...] = (1.05, 1.1, 1.15, 1.2)
    rotation_angles_deg: tuple[float, ...] = (-15, -10, -5, 5, 10, 15)
    noise_mean_range_hu: tuple[float, float] = (-400.0, 200.0)
    noise_std_choices_hu: tuple[float, ...] = (25.0, 50.0, 75.0)
    elastic_coefficient: float = 12.0
    elastic_scale: float = 1000.0
    # anterior-posterior, latero-lateral, cranio-caudal
    blur_kernel: tuple[int, int, int] = (4, 3, 3)
    rng_seed: int = 0

    def __post_init__(self):
        if self.factor < 0:
            raise ValueError("augmentation factor must be >= 0")

    def to_dict(self):
        return asdict(self)


def _axial_affine(arr, matrix2, order, cval):
    """Apply a 2x2 map in the axial plane about the slice centre.

    ``matrix2`` maps output coordinates to input coordinates.
    """
    m = np.eye(3)
    m[:2, :2] = matrix2
    center = (np.array(arr.shape, dtype=float) - 1) / 2
    offset = center - m @ center
    src = arr.astype(np.float32)
    out = ndimage.affine_transform(src, m, offset=offset, order=order, mode="constant", cval=cval)
    return out


def _geometric(vol, mask, matrix2):
    v = _axial_affine(vol, matrix2, order=3, cval=FILL_HU)
    m = _axial_affine(mask, matrix2, order=0, cval=0.0)
    return v.astype(np.float32), (m > 0.5).astype(np.uint8)


def zoom(vol, mask, factor):
    """Zoom in the axial plane; the output keeps the input dims (centre crop)."""
    if factor <= 0:
        raise ValueError("zoom factor must be positive")
    return _geometric(vol, mask, np.eye(2) / factor)


def rotate(vol, mask, angle_deg):
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return _geometric(vol, mask, np.array([[c, s], [-s, c]]))


def add_gaussian_noise(vol, mean_hu, std_hu, rng):
    vol = np.asarray(vol, dtype=np.float32)
    return vol + rng.normal(mean_hu, std_hu, vol.shape).astype(np.float32)


def elastic_deform(vol, mask, coefficient=12.0, scale=1000.0, rng=None):
    """Random elastic warp: a uniform [-1, 1] displacement field per axis,
    Gaussian-smoothed with sigma ``coefficient`` and multiplied by ``scale``."""
    rng = rng if rng is not None else np.random.default_rng()
    vol = np.asarray(vol, dtype=np.float32)
    if scale == 0:
        return vol.copy(), np.asarray(mask).astype(np.uint8)
    shape = vol.shape
    coords = list(np.meshgrid(*(np.arange(n, dtype=np.float32) for n in shape), indexing="ij"))
    for axis in range(3):
        d = ndimage.gaussian_filter(rng.uniform(-1, 1, shape).astype(np.float32), coefficient, mode="constant")
        coords[axis] += scale * d
    v = ndimage.map_coordinates(vol, coords, order=3, mode="constant", cval=FILL_HU)
    m = ndimage.map_coordinates(np.asarray(mask, dtype=np.float32), coords, order=0, mode="constant", cval=0.0)
    return v.astype(np.float32), (m > 0.5).astype(np.uint8)


def _line_kernel(k):
    kernel = np.zeros((k, k), dtype=np.float32)
    kernel[k // 2, :] = 1.0 / k
    return kernel


def _blur_along(vol, axis, k):
    """Slice-wise filter2D with a normalised central-row kernel of size k x k,
    oriented so the row runs along ``axis``."""
    if k <= 1:
        return vol
    slice_axis = 2 if axis != 2 else 1
    plane = [a for a in range(3) if a != slice_axis]
    # put the slice axis first and the blur axis last (image columns)
    other = plane[0] if plane[1] == axis else plane[1]
    stack = np.ascontiguousarray(np.transpose(vol, (slice_axis, other, axis)), dtype=np.float32)
    kernel = _line_kernel(k)
    out = np.empty_like(stack)
    for i in range(stack.shape[0]):
        out[i] = cv2.filter2D(stack[i], -1, kernel)
    return np.transpose(out, np.argsort((slice_axis, other, axis)))


def motion_blur(vol, kernel=(4, 3, 3)):
    """Linear motion blur along anterior-posterior (axis 1), latero-lateral
    (axis 0) and cranio-caudal (axis 2) with the given kernel sizes."""
    ap, ll, cc = kernel
    out = np.asarray(vol, dtype=np.float32)
    for axis, k in ((1, ap), (0, ll), (2, cc)):
        out = _blur_along(out, axis, k)
    return out


TRANSFORMS = ("zoom", "rotate", "noise", "elastic", "blur")


def apply_transform(name, vol, mask, spec: AugmentationSpec, rng):
    """Sample parameters for ``name`` and apply it. Returns (vol, mask, params)."""
    if name == "zoom":
        f = float(rng.choice(spec.zoom_factors))
        return (*zoom(vol, mask, f), {"factor": f})
    if name == "rotate":
        a = float(rng.choice(spec.rotation_angles_deg))
        return (*rotate(vol, mask, a), {"angle_deg": a})
    if name == "noise":
        mean = float(rng.uniform(*spec.noise_mean_range_hu))
        std = float(rng.choice(spec.noise_std_choices_hu))
        return add_gaussian_noise(vol, mean, std, rng), mask, {"mean_hu": mean, "std_hu": std}
    if name == "elastic":
        v, m = elastic_deform(vol, mask, spec.elastic_coefficient, spec.elastic_scale, rng)
        return v, m, {"coefficient": spec.elastic_coefficient, "scale": spec.elastic_scale}
    if name == "blur":
        return motion_blur(vol, spec.blur_kernel), mask, {"kernel": list(spec.blur_kernel)}
    raise ValueError(f"unknown transform {name!r}")


def augment_pair(vol, mask, spec: AugmentationSpec, rng):
    """One augmented copy: two distinct transforms, applied in sampled order."""
    picks = rng.choice(len(TRANSFORMS), size=2, replace=False)
    v = np.asarray(vol, dtype=np.float32)
    m = np.asarray(mask).astype(np.uint8)
    record = []
    for i in picks:
        name = TRANSFORMS[int(i)]
        v, m, params = apply_transform(name, v, m, spec, rng)
        record.append({"transform": name, **params})
    return v, m, record


def augment_dataset(pairs, spec: AugmentationSpec, with_records=False, jobs=1):
    """``spec.factor`` augmented pairs per input pair.

    Each input pair draws from its own rng stream derived from ``spec.rng_seed``,
    so results do not depend on ``jobs``.
    """
    pairs = list(pairs)
    streams = np.random.SeedSequence(spec.rng_seed).spawn(len(pairs))

    def work(i):
        rng = np.random.default_rng(streams[i])
        vol, mask = pairs[i]
        return [augment_pair(vol, mask, spec, rng) for _ in range(spec.factor)]

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, range(len(pairs))))
    else:
        results = [work(i) for i in range(len(pairs))]
    out = [item for group in results for item in group]
    if with_records:
        return [(v, m) for v, m, _ in out], [r for _, _, r in out]
    return [(v, m) for v, m, _ in out]
