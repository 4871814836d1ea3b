"""Dice metric, Dice loss, class-weighted cross-entropy and class weights.

Loss functions take torch tensors (numpy arrays are converted) so they can be
used directly for training. Probability fields are either unbatched,
``(classes, X, Y, Z)``, or batched, ``(N, classes, X, Y, Z)``; foreground
fields and masks drop the class axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyMaskError, GeometryError

PROB_FLOOR = 1e-7


def _mask_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "voxels", m)).astype(bool)


def dice_metric(m_true, m_pred) -> float:
    """2|A and B| / (|A| + |B|) on binary masks; 1.0 when both are empty."""
    a, b = _mask_array(m_true), _mask_array(m_pred)
    if a.shape != b.shape:
        raise GeometryError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(getattr(x, "voxels", x)), dtype=dtype)


def _batched(x: torch.Tensor, spatial_ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == spatial_ndim else x


def dice_loss(p_fg, m_true):
    """1 - soft Dice on the foreground channel, averaged over the batch.

    Intersection is sum(p * m), the denominator sum(p) + sum(m). A sample whose
    prediction and mask are both empty contributes 0.
    """
    p = _batched(_tensor(p_fg), 3)
    m = _batched(_tensor(m_true, like=p), 3)
    if p.shape != m.shape:
        raise GeometryError(f"shape mismatch {tuple(p.shape)} vs {tuple(m.shape)}")
    dims = tuple(range(1, p.ndim))
    inter = (p * m).sum(dims)
    denom = p.sum(dims) + m.sum(dims)
    # test for exact emptiness so a NaN denominator propagates
    empty = denom == 0
    safe = torch.where(empty, torch.ones_like(denom), denom)
    dice = torch.where(empty, torch.ones_like(denom), 2 * inter / safe)
    return (1 - dice).mean()


@dataclass(frozen=True)
class ClassWeights:
    f: tuple[float, float]
    w0: float
    w: tuple[float, float]

    @classmethod
    def from_frequencies(cls, f) -> "ClassWeights":
        f = tuple(float(x) for x in f)
        if min(f) <= 0:
            raise EmptyMaskError(f"every class needs voxels in the training set, got f={f}")
        w0 = float(np.mean(f))
        return cls(f, w0, tuple(w0 / fj for fj in f))

    def to_dict(self):
        return {"f": list(self.f), "w0": self.w0, "w": list(self.w)}


def compute_class_weights(training_masks) -> ClassWeights:
    """f_j = mean voxel count of class j per mask, w0 = mean(f), w_j = w0 / f_j."""
    masks = [_mask_array(m) for m in training_masks]
    if not masks:
        raise ValueError("need at least one training mask")
    fg = np.array([np.count_nonzero(m) for m in masks], dtype=np.float64)
    bg = np.array([m.size for m in masks], dtype=np.float64) - fg
    if fg.sum() == 0:
        raise EmptyMaskError("training set has no foreground voxels")
    return ClassWeights.from_frequencies((bg.mean(), fg.mean()))


def weighted_cross_entropy(p, m_true, weights: ClassWeights):
    """Mean over voxels of -w_c * log p_c, c the true class of each voxel."""
    p = _batched(_tensor(p), 4)
    m = _batched(_tensor(m_true, like=p), 3)
    if p.shape[1] != 2 or p.shape[2:] != m.shape[1:] or p.shape[0] != m.shape[0]:
        raise GeometryError(f"shape mismatch {tuple(p.shape)} vs {tuple(m.shape)}")
    w0, w1 = weights.w
    logp0 = torch.log(p[:, 0].clamp_min(PROB_FLOOR))
    logp1 = torch.log(p[:, 1].clamp_min(PROB_FLOOR))
    per_voxel = -(w1 * m * logp1 + w0 * (1 - m) * logp0)
    return per_voxel.mean()


def combined_loss(p, m_true, weights: ClassWeights):
    """Dice loss on the foreground channel plus weighted cross-entropy."""
    p = _tensor(p)
    fg = p[1] if p.ndim == 4 else p[:, 1]
    return dice_loss(fg, m_true) + weighted_cross_entropy(p, m_true, weights)
