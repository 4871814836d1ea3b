"""Dataset splitting, the training loop and cascade training."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationSpec, augment_dataset
from .cascade import segment_lungs
from .errors import LungQuantError
from .losses import ClassWeights, combined_loss, compute_class_weights, dice_loss, dice_metric
from .manifest import ManifestEntry, manifest_hash
from .model import UNet, UNetConfig, build_unet, predict_mask, save_checkpoint
from .preprocess import LESION_WINDOW, LUNG_WINDOW, HuWindow, resample_array, window_and_normalize
from .refine import DEFAULT_PADDING_MM, bounding_box, crop
from .volume_io import load_mask, load_volume

log = logging.getLogger(__name__)


class TrainingError(LungQuantError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    per_source: bool = True

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) < 0:
            raise ValueError(f"fractions must be 3 non-negative numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")


SPLIT_60 = SplitPlan((0.6, 0.2, 0.2))
SPLIT_90 = SplitPlan((0.9, 0.1, 0.0))


def largest_remainder(n: int, fractions) -> list[int]:
    """Integer counts summing to n; leftovers go to the largest fractional
    parts, earlier partitions first on ties."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(groups, plan: SplitPlan = SPLIT_60):
    """Split case ids into (train, val, test).

    ``groups`` maps source dataset name to its case ids (a flat list is one
    source). With ``plan.per_source`` each source is split proportionally.
    """
    if not isinstance(groups, dict):
        groups = {"default": list(groups)}
    all_ids = [i for ids in groups.values() for i in ids]
    if len(set(all_ids)) != len(all_ids):
        raise ValueError("case ids must be unique across sources")
    if not plan.per_source:
        groups = {"all": all_ids}
    parts = ([], [], [])
    for source in sorted(groups):
        ids = sorted(groups[source])
        if not ids:
            raise ValueError(f"source {source!r} has no cases")
        rng = np.random.default_rng([plan.seed, zlib.crc32(source.encode())])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train, n_val, _ = largest_remainder(len(ids), plan.fractions)
        parts[0].extend(ids[:n_train])
        parts[1].extend(ids[n_train : n_train + n_val])
        parts[2].extend(ids[n_train + n_val :])
    return parts


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-4
    batch_size: int = 1
    loss: str = "dice"  # "dice" or "dice+wce"
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    unet: UNetConfig = field(default_factory=UNetConfig)
    split: SplitPlan = SPLIT_60
    # stop once validation Dice reaches this value (None: run all epochs)
    early_stop_dice: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("dice", "dice+wce"):
            raise ValueError(f"loss must be 'dice' or 'dice+wce', got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "augmentation" in d:
            aug = dict(d["augmentation"])
            for key in ("zoom_factors", "rotation_angles_deg", "noise_mean_range_hu", "noise_std_choices_hu", "blur_kernel"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augmentation"] = AugmentationSpec(**aug)
        if "unet" in d:
            d["unet"] = UNetConfig(**d["unet"])
        if "split" in d:
            s = dict(d["split"])
            if "fractions" in s:
                s["fractions"] = tuple(s["fractions"])
            d["split"] = SplitPlan(**s)
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_dice: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def train_loss(self):
        return [r["train_loss"] for r in self.records]

    @property
    def val_dice(self):
        return [r["val_dice"] for r in self.records]


def _stack(pairs):
    x = torch.from_numpy(np.stack([np.asarray(p[0], dtype=np.float32) for p in pairs]))[:, None]
    y = torch.from_numpy(np.stack([np.asarray(p[1], dtype=np.float32) for p in pairs]))
    return x, y


def evaluate_dice(model: UNet, pairs) -> list[float]:
    return [dice_metric(m, predict_mask(model, img)) for img, m in pairs]


def train(
    model: UNet,
    train_pairs,
    val_pairs,
    cfg: TrainConfig,
    class_weights: ClassWeights | None = None,
    history_path=None,
    run_info: dict | None = None,
):
    """Adam training; returns (model with the best-validation weights, History).

    Pairs are (image, mask) arrays on the model grid, images already windowed
    to [0, 1]. Without validation pairs the last epoch is kept and a warning
    recorded.
    """
    train_pairs = list(train_pairs)
    val_pairs = list(val_pairs)
    if not train_pairs:
        raise TrainingError("training set is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.loss == "dice+wce" and class_weights is None:
        class_weights = compute_class_weights([m for _, m in train_pairs])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = History()
    if not val_pairs:
        msg = "no validation cases: keeping the last epoch"
        log.warning(msg)
        history.warnings.append(msg)
    best_state = None
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            model.train()
            order = rng.permutation(len(train_pairs))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                x, y = _stack([train_pairs[i] for i in order[start : start + cfg.batch_size]])
                p = torch.softmax(model(x), dim=1)
                if cfg.loss == "dice":
                    loss = dice_loss(p[:, 1], y)
                else:
                    loss = combined_loss(p, y, class_weights)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}; "
                        f"input range [{x.min().item():.3g}, {x.max().item():.3g}], lr {cfg.learning_rate}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            val = float(np.mean(evaluate_dice(model, val_pairs))) if val_pairs else None
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val, "seconds": time.time() - t0}
            if run_info:
                record.update(run_info)
            history.records.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if val is not None and (history.best_val_dice is None or val > history.best_val_dice):
                history.best_val_dice, history.best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
            log.info("epoch %d loss %.4f val_dice %s", epoch, record["train_loss"], val)
            if cfg.early_stop_dice is not None and val is not None and val >= cfg.early_stop_dice:
                break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = len(history.records)
    model.eval()
    return model, history


# ---------------------------------------------------------------- data prep


def _cache_dir():
    d = os.environ.get("LUNGQUANT_CACHE")
    return Path(d) if d else None


def _cache_key(*parts) -> str:
    h = hashlib.sha1()
    for p in parts:
        if isinstance(p, (str, Path)) and Path(p).exists():
            st = Path(p).stat()
            p = f"{Path(p).resolve()}:{st.st_mtime_ns}:{st.st_size}"
        h.update(repr(p).encode())
    return h.hexdigest()


def prepare_pair(image_hu, mask, window: HuWindow, dims):
    """Window, then resample image (trilinear) and mask (nearest) to ``dims``."""
    img = resample_array(window_and_normalize(np.asarray(image_hu, dtype=np.float32), window), dims, order=1)
    m = resample_array(np.asarray(mask).astype(np.uint8), dims, order=0)
    return img.astype(np.float32), m.astype(np.uint8)


def _load_region(entry: ManifestEntry, mask_key, box_fn=None):
    """HU image and mask for ``entry``, cropped by ``box_fn(vol)`` if given."""
    vol = load_volume(entry.image_path)
    mask = load_mask(getattr(entry, mask_key))
    if box_fn is not None:
        box = box_fn(entry, vol)
        vol, mask = crop(vol, box), crop(mask, box)
    return vol.voxels, mask.voxels


def build_pairs(entries, mask_key, window, dims, aug: AugmentationSpec | None, box_fn=None, box_tag=""):
    """Model-grid training pairs for ``entries`` plus their augmented copies.

    Augmentation runs on the HU image at its native resolution (after any
    crop), then goes through the same windowing and resampling.
    """
    raw, pairs = [], []
    cache = _cache_dir()
    for e in entries:
        key = _cache_key(e.image_path, getattr(e, mask_key), window.to_list(), tuple(dims), box_tag)
        cached = cache / f"{key}.npz" if cache else None
        need_raw = aug is not None and aug.factor > 0
        if cached is not None and cached.exists() and not need_raw:
            z = np.load(cached)
            pairs.append((z["image"], z["mask"]))
            continue
        img, m = _load_region(e, mask_key, box_fn)
        raw.append((img, m))
        pair = prepare_pair(img, m, window, dims)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(cached, image=pair[0], mask=pair[1])
        pairs.append(pair)
    if aug is not None and aug.factor > 0:
        pairs += [prepare_pair(v, m, window, dims) for v, m in augment_dataset(raw, aug)]
    return pairs


def assign_splits(entries, plan: SplitPlan):
    """Use each entry's explicit ``split`` field when present, else ``plan``."""
    explicit = {e.case_id: e.extra["split"] for e in entries if "split" in e.extra}
    rest = [e for e in entries if e.case_id not in explicit]
    out = {"train": [], "val": [], "test": []}
    if rest:
        groups = {}
        for e in rest:
            groups.setdefault(e.source_dataset, []).append(e.case_id)
        for name, ids in zip(("train", "val", "test"), split_dataset(groups, plan)):
            out[name].extend(ids)
    for cid, name in explicit.items():
        if name not in out:
            raise ValueError(f"{cid}: unknown split {name!r}")
        out[name].append(cid)
    by_id = {e.case_id: e for e in entries}
    return {k: [by_id[c] for c in v] for k, v in out.items()}


def _fit(task, train_entries, val_entries, cfg, out_dir, window, mask_key, box_fn=None, box_tag="", run_info=None):
    dims = cfg.unet.input_dims
    train_pairs = build_pairs(train_entries, mask_key, window, dims, cfg.augmentation, box_fn, box_tag)
    val_pairs = build_pairs(val_entries, mask_key, window, dims, None, box_fn, box_tag)
    model = build_unet(cfg.unet, seed=cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = compute_class_weights([m for _, m in train_pairs]) if cfg.loss == "dice+wce" else None
    model, history = train(model, train_pairs, val_pairs, cfg, weights, out_dir / f"{task}_history.jsonl", run_info)
    extra = {
        "task": task,
        "train_config": cfg.to_dict(),
        "best_epoch": history.best_epoch,
        "best_val_dice": history.best_val_dice,
        "train_cases": [e.case_id for e in train_entries],
        "val_cases": [e.case_id for e in val_entries],
        "warnings": history.warnings,
        **(run_info or {}),
    }
    if weights is not None:
        extra["class_weights"] = weights.to_dict()
    save_checkpoint(model, out_dir / f"{task}.pt", window, extra)
    return model, history


def train_lungs(entries, cfg: TrainConfig, out_dir):
    lung_entries = [e for e in entries if e.lung_mask_path]
    splits = assign_splits(lung_entries, cfg.split)
    run_info = {"manifest_sha256": manifest_hash(lung_entries)}
    return _fit("unet1", splits["train"], splits["val"], cfg, out_dir, LUNG_WINDOW, "lung_mask_path", run_info=run_info)


def lung_box_fn(unet1=None, use_reference=True, padding_mm=DEFAULT_PADDING_MM):
    """Box source for U-net 2 crops: the reference lung mask when available
    (and ``use_reference``), otherwise U-net 1's refined prediction."""

    def fn(entry, vol):
        if use_reference and entry.lung_mask_path:
            lungs = load_mask(entry.lung_mask_path)
        elif unet1 is not None:
            lungs = segment_lungs(vol, unet1)
        else:
            raise TrainingError(f"{entry.case_id}: no lung mask and no U-net 1 to derive the lung box")
        return bounding_box(lungs, vol.spacing, padding_mm)

    return fn


def weights_digest(model) -> str:
    """Hash of a model's parameters (accepts a UNet or a UNetSegmenter)."""
    model = getattr(model, "model", model)
    if model is None:
        return "none"
    h = hashlib.sha1()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_lesions(entries, cfg: TrainConfig, out_dir, unet1=None, use_reference_lungs=True):
    lesion_entries = [e for e in entries if e.lesion_mask_path]
    splits = assign_splits(lesion_entries, cfg.split)
    tag = "ref" if use_reference_lungs else f"pred:{weights_digest(unet1)}"
    run_info = {"manifest_sha256": manifest_hash(lesion_entries), "box_source": "reference" if use_reference_lungs else "unet1"}
    box_fn = lung_box_fn(unet1, use_reference_lungs)
    return _fit("unet2", splits["train"], splits["val"], cfg, out_dir, LESION_WINDOW, "lesion_mask_path", box_fn, tag, run_info)


def train_cascade(entries, cfg1: TrainConfig, cfg2: TrainConfig, out_dir, use_reference_lungs=True):
    """Train U-net 1 on lung masks, then U-net 2 on lesion masks cropped to
    the padded lung box. Returns ((unet1, history1), (unet2, history2))."""
    unet1, h1 = train_lungs(entries, cfg1, out_dir)
    unet2, h2 = train_lesions(entries, cfg2, out_dir, unet1, use_reference_lungs)
    return (unet1, h1), (unet2, h2)
