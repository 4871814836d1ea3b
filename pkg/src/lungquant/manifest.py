"""Case manifests: JSON lists of image/mask paths with per-case metadata.

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

KNOWN_KEYS = {"case_id", "image_path", "lung_mask_path", "lesion_mask_path", "source_dataset"}


@dataclass
class ManifestEntry:
    case_id: str
    image_path: str
    lung_mask_path: str | None = None
    lesion_mask_path: str | None = None
    source_dataset: str = "default"
    extra: dict = field(default_factory=dict)

    def to_dict(self, base: Path | None = None):
        d = {k: v for k, v in asdict(self).items() if k != "extra" and v is not None}
        if base is not None:
            for key in ("image_path", "lung_mask_path", "lesion_mask_path"):
                if key in d:
                    try:
                        d[key] = str(Path(d[key]).relative_to(base))
                    except ValueError:
                        pass
        d.update(self.extra)
        return d


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return str(p if p.is_absolute() else base / p)


def parse_manifest(data, base: Path) -> list[ManifestEntry]:
    if isinstance(data, dict):
        data = data.get("cases", [])
    if not isinstance(data, list):
        raise ValueError("manifest must be a list of cases or an object with a 'cases' list")
    entries = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "case_id" not in item or "image_path" not in item:
            raise ValueError(f"manifest entry {i} needs 'case_id' and 'image_path'")
        entries.append(
            ManifestEntry(
                case_id=str(item["case_id"]),
                image_path=_resolve(base, item["image_path"]),
                lung_mask_path=_resolve(base, item.get("lung_mask_path")),
                lesion_mask_path=_resolve(base, item.get("lesion_mask_path")),
                source_dataset=str(item.get("source_dataset", "default")),
                extra={k: v for k, v in item.items() if k not in KNOWN_KEYS},
            )
        )
    return entries


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    return parse_manifest(json.loads(path.read_text()), path.parent)


def write_manifest(entries, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"cases": [e.to_dict(base=path.parent.resolve()) for e in entries]}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2))


def manifest_hash(entries) -> str:
    blob = json.dumps([e.to_dict() for e in entries], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def validate_manifest(entries, need_lung=False, need_lesion=False) -> list[str]:
    """Problems that would stop a run, as human-readable lines."""
    errors = []
    seen = set()
    for e in entries:
        if e.case_id in seen:
            errors.append(f"{e.case_id}: duplicate case_id")
        seen.add(e.case_id)
        if not Path(e.image_path).exists():
            errors.append(f"{e.case_id}: image not found: {e.image_path}")
        for key, needed in (("lung_mask_path", need_lung), ("lesion_mask_path", need_lesion)):
            p = getattr(e, key)
            if p is None:
                if needed:
                    errors.append(f"{e.case_id}: missing {key}")
            elif not Path(p).exists():
                errors.append(f"{e.case_id}: {key} not found: {p}")
    if not entries:
        errors.append("manifest has no cases")
    return errors
