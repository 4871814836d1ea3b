"""Segmentation, quantification and severity-score evaluation."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cascade import ct_severity_score, final_lung_mask, quantify
from .errors import LungQuantError
from .losses import dice_metric
from .volume_io import BinaryMask3D, load_mask

log = logging.getLogger(__name__)

MOSMED_TO_CTSS = {0: frozenset({0}), 1: frozenset({1, 2}), 2: frozenset({3}), 3: frozenset({4}), 4: frozenset({5})}


class UnpairedCasesError(LungQuantError):
    def __init__(self, missing_pred, missing_ref):
        self.missing_pred = sorted(missing_pred)
        self.missing_ref = sorted(missing_ref)
        parts = []
        if self.missing_pred:
            parts.append(f"no prediction for: {', '.join(map(str, self.missing_pred))}")
        if self.missing_ref:
            parts.append(f"no reference for: {', '.join(map(str, self.missing_ref))}")
        super().__init__("; ".join(parts))


def _paired(pred: dict, ref: dict):
    missing_pred = set(ref) - set(pred)
    missing_ref = set(pred) - set(ref)
    if missing_pred or missing_ref:
        raise UnpairedCasesError(missing_pred, missing_ref)
    return sorted(ref)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class SegmentationSummary:
    per_case: dict[str, float]
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"


def evaluate_segmentation(pred_masks: dict, ref_masks: dict) -> SegmentationSummary:
    ids = _paired(pred_masks, ref_masks)
    per_case = {cid: dice_metric(ref_masks[cid], pred_masks[cid]) for cid in ids}
    mean, std = mean_std(per_case.values())
    return SegmentationSummary(per_case, mean, std)


@dataclass
class QuantificationSummary:
    mae: float
    per_source: dict[str, float]
    counts: dict[str, int]
    n: int


def evaluate_quantification(pred_p: dict, ref_p: dict, sources: dict | None = None) -> QuantificationSummary:
    """Mean absolute error of P (percentage points), overall and per source."""
    ids = _paired(pred_p, ref_p)
    sources = sources or {}
    err = {cid: abs(float(pred_p[cid]) - float(ref_p[cid])) for cid in ids}
    by_source: dict[str, list[float]] = {}
    for cid in ids:
        by_source.setdefault(sources.get(cid, "default"), []).append(err[cid])
    return QuantificationSummary(
        mae=float(np.mean(list(err.values()))) if err else float("nan"),
        per_source={s: float(np.mean(v)) for s, v in by_source.items()},
        counts={s: len(v) for s, v in by_source.items()},
        n=len(ids),
    )


def _as_ref_set(ref):
    if isinstance(ref, (set, frozenset, list, tuple)):
        return frozenset(int(r) for r in ref)
    return frozenset({int(ref)})


def ctss_distance(pred: int, ref) -> int:
    """|pred - ref|, or the distance to the nearest member of a reference range."""
    return min(abs(int(pred) - r) for r in _as_ref_set(ref))


@dataclass
class CtssSummary:
    correct: int
    total: int
    histogram: dict[int, int]
    per_case: dict[str, int] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def misclassified(self, k: int) -> int:
        return self.histogram.get(k, 0)

    def table_row(self) -> tuple[str, str, str]:
        """(accuracy, 1-class, 2-class) cells, e.g. ('47/50', '3/50', '0')."""
        cell = lambda n: f"{n}/{self.total}" if n else "0"  # noqa: E731
        return f"{self.correct}/{self.total}", cell(self.misclassified(1)), cell(self.misclassified(2))


def evaluate_ctss(pred_scores, ref_scores) -> CtssSummary:
    """Accuracy and a histogram of |pred - ref| over misclassified cases.

    Scores may be dicts keyed by case id or equal-length sequences. A
    reference may be a set of acceptable scores (MosMed category 1).
    """
    if not isinstance(pred_scores, dict):
        pred_scores = dict(enumerate(pred_scores))
        ref_scores = dict(enumerate(ref_scores))
    ids = _paired(pred_scores, ref_scores)
    per_case = {}
    for cid in ids:
        p = pred_scores[cid]
        if int(p) != p or not 1 <= p <= 5:
            raise ValueError(f"{cid}: predicted CT-SS must be in 1..5, got {p}")
        refs = _as_ref_set(ref_scores[cid])
        if not refs or any(not 0 <= r <= 5 for r in refs):
            raise ValueError(f"{cid}: invalid reference CT-SS {ref_scores[cid]}")
        per_case[cid] = ctss_distance(p, refs)
    hist = Counter(d for d in per_case.values() if d > 0)
    correct = sum(d == 0 for d in per_case.values())
    return CtssSummary(correct, len(ids), dict(sorted(hist.items())), {str(k): v for k, v in per_case.items()})


def mosmed_ctss_reference(category: int) -> frozenset:
    """CT-SS values compatible with a MosMed CT-0..CT-4 category."""
    if category not in MOSMED_TO_CTSS:
        raise ValueError(f"MosMed category must be 0..4, got {category}")
    return MOSMED_TO_CTSS[category]


def mosmed_category(p: float) -> int:
    """MosMed category of a percentage: 0 for P = 0, then (0,25], (25,50], (50,75], (75,100]."""
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentage must lie in [0, 100], got {p}")
    if p == 0:
        return 0
    return 1 + sum(p > t for t in (25.0, 50.0, 75.0))


def reference_percentage(lung, lesion) -> float:
    """P from reference masks, with lesions counted as lung tissue."""
    return quantify(final_lung_mask(lung, lesion), lesion).percentage_p


class OracleSegmenter:
    """Stand-in for a U-net that returns a known mask on the native grid.

    Given the (possibly cropped) volume the cascade hands it, it cuts the
    matching region out of ``truth`` using the volume's origin.
    """

    input_dims = None

    def __init__(self, truth: BinaryMask3D):
        self.truth = truth

    def segment(self, vol) -> BinaryMask3D:
        offset = [int(round((o - t) / s)) for o, t, s in zip(vol.origin, self.truth.origin, vol.spacing)]
        sl = tuple(slice(o, o + d) for o, d in zip(offset, vol.dims))
        sub = self.truth.voxels[sl]
        if sub.shape != tuple(vol.dims):
            raise LungQuantError("oracle region falls outside the reference mask")
        return BinaryMask3D(sub, vol.spacing, vol.origin)


# ---------------------------------------------------------------- case-level


@dataclass
class CaseEvaluation:
    case_id: str
    source: str = "default"
    dice_lung: float | None = None
    dice_lesion: float | None = None
    p_pred: float | None = None
    p_ref: float | None = None
    ct_ss_pred: int | None = None
    ct_ss_ref: list[int] | None = None


@dataclass
class EvaluationSummary:
    per_case: list[CaseEvaluation]
    lung_dice: tuple[float, float] | None
    lesion_dice: tuple[float, float] | None
    quantification: QuantificationSummary | None
    ctss: CtssSummary | None
    ctss_by_source: dict[str, CtssSummary]

    def to_dict(self):
        d = {
            "per_case": [asdict(c) for c in self.per_case],
            "lung_dice": None if self.lung_dice is None else {"mean": self.lung_dice[0], "std": self.lung_dice[1]},
            "lesion_dice": None if self.lesion_dice is None else {"mean": self.lesion_dice[0], "std": self.lesion_dice[1]},
            "mae_p": None,
            "ctss": None,
            "ctss_by_source": {},
        }
        if self.quantification is not None:
            d["mae_p"] = asdict(self.quantification)
        for name, s in [("overall", self.ctss), *self.ctss_by_source.items()]:
            if s is None:
                continue
            entry = {
                "accuracy": s.accuracy,
                "correct": s.correct,
                "total": s.total,
                "misclassification": {str(k): v for k, v in s.histogram.items()},
            }
            if name == "overall":
                d["ctss"] = entry
            else:
                d["ctss_by_source"][name] = entry
        return d


def _reference_ctss(entry, p_ref):
    if "ct_ss" in entry.extra:
        return _as_ref_set(entry.extra["ct_ss"])
    if "mosmed_category" in entry.extra:
        return mosmed_ctss_reference(int(entry.extra["mosmed_category"]))
    if p_ref is not None:
        return frozenset({ct_severity_score(p_ref)})
    return None


def evaluate_cases(pred_dir, ref_entries) -> EvaluationSummary:
    """Compare ``pred_dir/<case_id>/{lung_mask,lesion_mask}.nii.gz`` and
    ``report.json`` against the reference manifest entries."""
    pred_dir = Path(pred_dir)
    available = {p.name for p in pred_dir.iterdir() if p.is_dir() and (p / "report.json").exists()} if pred_dir.exists() else set()
    expected = {e.case_id for e in ref_entries}
    if expected - available:
        raise UnpairedCasesError(expected - available, set())

    cases = []
    for e in ref_entries:
        d = pred_dir / e.case_id
        report = json.loads((d / "report.json").read_text())
        c = CaseEvaluation(e.case_id, e.source_dataset, p_pred=report["percentage_p"], ct_ss_pred=report["ct_ss"])
        ref_lung = load_mask(e.lung_mask_path) if e.lung_mask_path else None
        ref_lesion = load_mask(e.lesion_mask_path) if e.lesion_mask_path else None
        if ref_lung is not None and (d / "lung_mask.nii.gz").exists():
            c.dice_lung = dice_metric(ref_lung, load_mask(d / "lung_mask.nii.gz"))
        if ref_lesion is not None and (d / "lesion_mask.nii.gz").exists():
            c.dice_lesion = dice_metric(ref_lesion, load_mask(d / "lesion_mask.nii.gz"))
        if ref_lung is not None and ref_lesion is not None:
            c.p_ref = reference_percentage(ref_lung, ref_lesion)
        elif "p_ref" in e.extra:
            c.p_ref = float(e.extra["p_ref"])
        refs = _reference_ctss(e, c.p_ref)
        c.ct_ss_ref = sorted(refs) if refs is not None else None
        cases.append(c)
    return summarize(cases)


def summarize(cases: list[CaseEvaluation]) -> EvaluationSummary:
    lung = [c.dice_lung for c in cases if c.dice_lung is not None]
    lesion = [c.dice_lesion for c in cases if c.dice_lesion is not None]
    with_p = [c for c in cases if c.p_ref is not None and c.p_pred is not None]
    quant = None
    if with_p:
        quant = evaluate_quantification(
            {c.case_id: c.p_pred for c in with_p},
            {c.case_id: c.p_ref for c in with_p},
            {c.case_id: c.source for c in with_p},
        )
    scored = [c for c in cases if c.ct_ss_ref is not None and c.ct_ss_pred is not None]
    ctss = None
    by_source = {}
    if scored:
        ctss = evaluate_ctss({c.case_id: c.ct_ss_pred for c in scored}, {c.case_id: c.ct_ss_ref for c in scored})
        for src in sorted({c.source for c in scored}):
            sub = [c for c in scored if c.source == src]
            by_source[src] = evaluate_ctss({c.case_id: c.ct_ss_pred for c in sub}, {c.case_id: c.ct_ss_ref for c in sub})
    return EvaluationSummary(
        per_case=cases,
        lung_dice=mean_std(lung) if lung else None,
        lesion_dice=mean_std(lesion) if lesion else None,
        quantification=quant,
        ctss=ctss,
        ctss_by_source=by_source,
    )
