"""The two-network cascade: lungs, then lesions inside the padded lung box,
then the affected percentage and its severity score."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyMaskError, GeometryError, StageError
from .model import UNet, load_checkpoint, predict_mask
from .preprocess import LESION_WINDOW, LUNG_WINDOW, HuWindow, resample, resample_mask_to_original, window_and_normalize
from .refine import DEFAULT_PADDING_MM, bounding_box, crop, refine_lung_mask_report, uncrop_mask
from .volume_io import BinaryMask3D, CtVolume

log = logging.getLogger(__name__)

CTSS_THRESHOLDS = (5.0, 25.0, 50.0, 75.0)


def ct_severity_score(p: float) -> int:
    """1 for P < 5, 2 for 5 <= P < 25, 3 for 25 <= P < 50, 4 for 50 <= P < 75, else 5."""
    p = float(p)
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentage must lie in [0, 100], got {p}")
    return 1 + sum(p >= t for t in CTSS_THRESHOLDS)


class UNetSegmenter:
    """A trained U-net plus the HU window it was trained with."""

    def __init__(self, model: UNet, window: HuWindow):
        self.model = model
        self.window = window

    @classmethod
    def from_checkpoint(cls, path) -> "UNetSegmenter":
        model, info = load_checkpoint(path)
        return cls(model, info.window)

    @property
    def input_dims(self):
        return self.model.config.input_dims

    def segment(self, vol: CtVolume) -> BinaryMask3D:
        """Foreground mask on the model grid."""
        grid = resample(window_and_normalize(vol, self.window), self.input_dims)
        return BinaryMask3D(predict_mask(self.model, grid), grid.spacing, grid.origin)


def _segmenter(obj, default_window):
    if isinstance(obj, UNet):
        return UNetSegmenter(obj, default_window)
    return obj


@dataclass
class SeverityReport:
    case_id: str
    lung_volume_ml: float
    lesion_volume_ml: float
    percentage_p: float
    ct_ss: int
    stage_warnings: list[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _segment_lungs(vol, unet1):
    seg = _segmenter(unet1, LUNG_WINDOW)
    grid_mask = seg.segment(vol)
    refinement = refine_lung_mask_report(grid_mask)
    return resample_mask_to_original(refinement.mask, vol), refinement


def segment_lungs(vol: CtVolume, unet1) -> BinaryMask3D:
    """U-net 1 prediction, refined on the model grid, mapped back to ``vol``'s grid."""
    return _segment_lungs(vol, unet1)[0]


def segment_lesions(vol: CtVolume, refined_lungs: BinaryMask3D, unet2, padding_mm: float = DEFAULT_PADDING_MM):
    """U-net 2 prediction inside the padded lung box, pasted back on ``vol``'s grid."""
    seg = _segmenter(unet2, LESION_WINDOW)
    box = bounding_box(refined_lungs, vol.spacing, padding_mm)
    sub = crop(vol, box)
    grid_mask = seg.segment(sub)
    return uncrop_mask(resample_mask_to_original(grid_mask, sub), box, vol)


def final_lung_mask(unet1_mask, unet2_mask):
    a = np.asarray(getattr(unet1_mask, "voxels", unet1_mask))
    b = np.asarray(getattr(unet2_mask, "voxels", unet2_mask))
    if a.shape != b.shape:
        raise GeometryError(f"mask dims differ: {a.shape} vs {b.shape}")
    out = (a > 0) | (b > 0)
    if isinstance(unet1_mask, BinaryMask3D):
        return BinaryMask3D(out, unet1_mask.spacing, unet1_mask.origin)
    return out.astype(np.uint8)


def quantify(lung, lesion, spacing=None, case_id: str = "case") -> SeverityReport:
    """P = 100 |lesion| / |lung|, volumes in ml, and the CT-SS for P."""
    lung_arr = np.asarray(getattr(lung, "voxels", lung)).astype(bool)
    lesion_arr = np.asarray(getattr(lesion, "voxels", lesion)).astype(bool)
    if lung_arr.shape != lesion_arr.shape:
        raise GeometryError(f"mask dims differ: {lung_arr.shape} vs {lesion_arr.shape}")
    n_lung = int(np.count_nonzero(lung_arr))
    if n_lung == 0:
        raise EmptyMaskError("lung mask is empty")
    if np.any(lesion_arr & ~lung_arr):
        raise GeometryError("lesion mask extends outside the lung mask; combine them with final_lung_mask first")
    if spacing is None:
        spacing = getattr(lung, "spacing", (1.0, 1.0, 1.0))
    n_lesion = int(np.count_nonzero(lesion_arr))
    voxel_ml = float(np.prod(spacing)) / 1000.0
    p = 100.0 * n_lesion / n_lung
    return SeverityReport(
        case_id=case_id,
        lung_volume_ml=n_lung * voxel_ml,
        lesion_volume_ml=n_lesion * voxel_ml,
        percentage_p=p,
        ct_ss=ct_severity_score(p),
    )


@dataclass
class PipelineResult:
    lung: BinaryMask3D
    lesion: BinaryMask3D
    report: SeverityReport
    unet1_lung: BinaryMask3D | None = None


def run_pipeline(vol: CtVolume, unet1, unet2, case_id: str = "case", padding_mm: float = DEFAULT_PADDING_MM) -> PipelineResult:
    """Lungs, refinement, lesions in the lung box, union, quantification.

    ``unet1``/``unet2`` are UNet models (default windows applied), UNetSegmenter
    objects, or anything with a ``segment(CtVolume) -> BinaryMask3D`` method
    and an ``input_dims`` attribute. Errors come back as StageError naming
    the failing stage.
    """
    warnings = []
    stage = "segment_lungs"
    try:
        lungs, refinement = _segment_lungs(vol, unet1)
        if refinement.warning:
            warnings.append(f"refine: {refinement.warning}")
        stage = "segment_lesions"
        lesion = segment_lesions(vol, lungs, unet2, padding_mm)
        stage = "union"
        lung = final_lung_mask(lungs, lesion)
        stage = "quantify"
        report = quantify(lung, lesion, vol.spacing, case_id)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    report.stage_warnings = warnings
    return PipelineResult(lung=lung, lesion=lesion, report=report, unet1_lung=lungs)
