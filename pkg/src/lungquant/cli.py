"""Command-line entry point: ``lungquant <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import volume_io
from .augment import AugmentationSpec, augment_pair
from .cascade import UNetSegmenter, run_pipeline
from .classical_seg import classical_lung_segmentation
from .errors import LungQuantError, StageError
from .evaluation import UnpairedCasesError, evaluate_cases
from .manifest import ManifestEntry, load_manifest, validate_manifest, write_manifest
from .phantom import DEFAULT_SHAPE, DEFAULT_SPACING, generate_phantom
from .report import plot_overlay, write_report
from .trainer import TrainConfig, train_lesions, train_lungs

log = logging.getLogger("lungquant")


class ValidationFailed(Exception):
    def __init__(self, problems):
        super().__init__("\n".join(problems))
        self.problems = problems


def load_schema(name: str) -> dict:
    return json.loads(resources.files("lungquant").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_json(doc, name):
    jsonschema.validate(doc, load_schema(name))


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------- commands


def cmd_phantom(args):
    if args.count < 1:
        raise ValidationFailed(["--count must be >= 1"])
    fractions = args.lesion_fractions or [0.0]
    bad = [f for f in fractions if not 0.0 <= f < 1.0]
    if bad:
        raise ValidationFailed([f"lesion fractions must lie in [0, 1): {bad}"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(args.seed).spawn(args.count)]

    def make(i):
        f = fractions[i % len(fractions)]
        ph = generate_phantom(seeds[i], f, shape=args.shape, spacing=args.spacing)
        cid = f"phantom_{i:03d}"
        paths = {k: out / f"{cid}_{k}.nii.gz" for k in ("image", "lung", "lesion")}
        volume_io.save_volume(ph.volume, paths["image"])
        volume_io.save_mask(ph.lung, paths["lung"])
        volume_io.save_mask(ph.lesion, paths["lesion"])
        return ManifestEntry(
            case_id=cid,
            image_path=str(paths["image"].resolve()),
            lung_mask_path=str(paths["lung"].resolve()),
            lesion_mask_path=str(paths["lesion"].resolve()),
            source_dataset="phantom",
            extra={"target_p": 100.0 * f, "p_ref": ph.lesion_percentage, "seed": seeds[i]},
        )

    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        entries = list(pool.map(make, range(args.count)))
    write_manifest(entries, out / "manifest.json", {"generator": {"seed": args.seed, "shape": list(args.shape), "spacing": list(args.spacing)}})
    validate_json(json.loads((out / "manifest.json").read_text()), "manifest")
    print(f"wrote {len(entries)} phantoms to {out}")
    return 0


def _load_config(path, task):
    problems = []
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return None, [f"config: {exc}"]
    if not isinstance(raw, dict):
        return None, ["config must be a JSON object"]
    raw.setdefault("loss", "dice" if task == "lungs" else "dice+wce")
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        return None, [f"config: {exc}"]
    if task == "lungs" and cfg.loss != "dice":
        problems.append("config: lung training uses the Dice loss ('dice')")
    return cfg, problems


def cmd_train(args):
    problems = []
    try:
        entries = load_manifest(args.manifest)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        entries = []
        problems.append(f"manifest: {exc}")
    cfg, cfg_problems = _load_config(args.config, args.task)
    problems += cfg_problems
    if entries:
        problems += validate_manifest(
            entries,
            need_lung=args.task == "lungs" or (args.task == "lesions" and not args.unet1),
            need_lesion=args.task == "lesions",
        )
    if args.task == "lesions" and args.unet1 and not Path(args.unet1).exists():
        problems.append(f"--unet1 checkpoint not found: {args.unet1}")
    if problems:
        raise ValidationFailed(problems)

    out = Path(args.out)
    if args.task == "lungs":
        _, history = train_lungs(entries, cfg, out)
        name = "unet1"
    else:
        unet1 = UNetSegmenter.from_checkpoint(args.unet1) if args.unet1 else None
        _, history = train_lesions(entries, cfg, out, unet1=unet1, use_reference_lungs=not args.predicted_boxes)
        name = "unet2"
    print(f"best epoch {history.best_epoch} (val Dice {history.best_val_dice}); checkpoint {out / (name + '.pt')}")
    return 0


def cmd_quantify(args):
    for p in (args.image, args.unet1, args.unet2):
        if not Path(p).exists():
            raise ValidationFailed([f"file not found: {p}"])
    vol = volume_io.load_volume(args.image)
    unet1 = UNetSegmenter.from_checkpoint(args.unet1)
    unet2 = UNetSegmenter.from_checkpoint(args.unet2)
    case_id = args.case_id or Path(args.image).name.split(".")[0]
    result = run_pipeline(vol, unet1, unet2, case_id=case_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volume_io.save_mask(result.lung, out / "lung_mask.nii.gz")
    volume_io.save_mask(result.lesion, out / "lesion_mask.nii.gz")
    doc = result.report.to_dict()
    validate_json(doc, "severity_report")
    (out / "report.json").write_text(json.dumps(doc, indent=2))
    if args.overlay:
        plot_overlay(vol, result.lung, None, result.lesion, None, out / "overlay.png")
    r = result.report
    print(f"{case_id}: P = {r.percentage_p:.2f}%  CT-SS = {r.ct_ss}  (lung {r.lung_volume_ml:.0f} ml, lesion {r.lesion_volume_ml:.0f} ml)")
    for w in r.stage_warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_evaluate(args):
    entries = load_manifest(args.ref_manifest)
    summary = evaluate_cases(args.pred_dir, entries)
    validate_json(summary.to_dict(), "evaluation_summary")
    written = write_report(summary, args.out)
    if args.overlays:
        figs = Path(args.out) / "figures"
        by_id = {e.case_id: e for e in entries}

        def overlay(cid):
            e, d = by_id[cid], Path(args.pred_dir) / cid
            load = lambda p: volume_io.load_mask(p) if p and Path(p).exists() else None  # noqa: E731
            plot_overlay(
                volume_io.load_volume(e.image_path),
                load(d / "lung_mask.nii.gz"),
                load(e.lung_mask_path),
                load(d / "lesion_mask.nii.gz"),
                load(e.lesion_mask_path),
                figs / f"overlay_{cid}.png",
            )

        with ThreadPoolExecutor(max(1, args.jobs)) as pool:
            list(pool.map(overlay, by_id))
    print((Path(args.out) / "tables.txt").read_text())
    print("wrote " + ", ".join(str(p) for p in written.values()))
    return 0


def cmd_classical_seg(args):
    if not Path(args.image).exists():
        raise ValidationFailed([f"file not found: {args.image}"])
    vol = volume_io.load_volume(args.image)
    mask = classical_lung_segmentation(vol, iterations=args.iterations)
    volume_io.save_mask(mask, args.out)
    print(f"wrote {args.out} ({mask.count} lung voxels)")
    return 0


def cmd_augment(args):
    entries = load_manifest(args.manifest)
    key = f"{args.mask}_mask_path"
    problems = validate_manifest(entries, need_lung=args.mask == "lung", need_lesion=args.mask == "lesion")
    if problems:
        raise ValidationFailed(problems)
    spec = AugmentationSpec(factor=args.factor, rng_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(spec.rng_seed).spawn(len(entries))

    def work(i):
        e = entries[i]
        vol = volume_io.load_volume(e.image_path)
        mask = volume_io.load_mask(getattr(e, key))
        rng = np.random.default_rng(streams[i])
        rows = []
        for j in range(spec.factor):
            v, m, record = augment_pair(vol.voxels, mask.voxels, spec, rng)
            cid = f"{e.case_id}_aug{j}"
            ip, mp = out / f"{cid}_image.nii.gz", out / f"{cid}_{args.mask}.nii.gz"
            volume_io.save_volume(vol.with_voxels(v), ip)
            volume_io.save_mask(volume_io.BinaryMask3D(m, mask.spacing, mask.origin), mp)
            rows.append({"case_id": cid, "image_path": ip.name, key: mp.name, "source_case": e.case_id, "source_dataset": e.source_dataset, "transforms": record})
        return rows

    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        rows = [r for group in pool.map(work, range(len(entries))) for r in group]
    doc = {"spec": spec.to_dict(), "cases": rows}
    validate_json(doc, "augmentation_manifest")
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))
    print(f"wrote {len(rows)} augmented pairs to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lungquant", description="Lung and COVID-19 lesion quantification in chest CT.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write synthetic CT phantoms and a manifest")
    s.add_argument("--count", type=int, required=True, help="number of phantoms")
    s.add_argument("--lesion-fractions", type=_floats, default=None, help="comma-separated lesion/lung fractions, cycled over cases")
    s.add_argument("--seed", type=int, default=0, help="master seed; each case gets a derived seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--shape", type=int, nargs=3, default=DEFAULT_SHAPE, help="grid size in voxels (x y z)")
    s.add_argument("--spacing", type=float, nargs=3, default=DEFAULT_SPACING, help="voxel spacing in mm")
    s.add_argument("--jobs", type=int, default=1, help="cases generated concurrently")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train U-net 1 (lungs) or U-net 2 (lesions)")
    s.add_argument("--task", choices=("lungs", "lesions"), required=True, help="lungs trains U-net 1, lesions trains U-net 2")
    s.add_argument("--manifest", required=True, help="case manifest (JSON)")
    s.add_argument("--config", required=True, help="training config (JSON, TrainConfig fields)")
    s.add_argument("--out", required=True, help="directory for the checkpoint, sidecar and history")
    s.add_argument("--unet1", help="U-net 1 checkpoint for lesion crops when cases lack lung masks")
    s.add_argument("--predicted-boxes", action="store_true", help="crop lesion training data with U-net 1 even when lung masks exist")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantify", help="run the cascade on one CT")
    s.add_argument("--image", required=True, help="CT volume (NIfTI)")
    s.add_argument("--unet1", required=True, help="lung U-net checkpoint")
    s.add_argument("--unet2", required=True, help="lesion U-net checkpoint")
    s.add_argument("--out", required=True, help="directory for masks and report.json")
    s.add_argument("--case-id", help="id written to the report (default: image file stem)")
    s.add_argument("--overlay", action="store_true", help="also write overlay.png")
    s.set_defaults(func=cmd_quantify)

    s = sub.add_parser("evaluate", help="score predictions against a reference manifest")
    s.add_argument("--pred-dir", required=True, help="directory of per-case quantify outputs")
    s.add_argument("--ref-manifest", required=True, help="manifest with reference masks or scores")
    s.add_argument("--out", required=True, help="directory for summary.json, per_case.csv, tables.txt and figures/")
    s.add_argument("--overlays", action="store_true", help="also draw contour overlays per case")
    s.add_argument("--jobs", type=int, default=1, help="cases processed concurrently")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("classical-seg", help="classical lung segmentation of one CT")
    s.add_argument("--image", required=True, help="CT volume (NIfTI)")
    s.add_argument("--out", required=True, help="output mask path (NIfTI)")
    s.add_argument("--iterations", type=int, default=100, help="active-contour iteration budget")
    s.set_defaults(func=cmd_classical_seg)

    s = sub.add_parser("augment", help="write augmented image/mask pairs and a manifest")
    s.add_argument("--manifest", required=True, help="case manifest (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mask", choices=("lung", "lesion"), default="lesion", help="which mask travels with the image")
    s.add_argument("--factor", type=int, default=2, help="augmented copies per case")
    s.add_argument("--seed", type=int, default=0, help="augmentation seed")
    s.add_argument("--jobs", type=int, default=1, help="cases processed concurrently")
    s.set_defaults(func=cmd_augment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationFailed as exc:
        for line in exc.problems:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: stage '{exc.stage}' failed: {exc.message}", file=sys.stderr)
        return 1
    except UnpairedCasesError as exc:
        print(f"error: unpaired cases: {exc}", file=sys.stderr)
        return 1
    except (LungQuantError, OSError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
