"""Text tables, CSV output and figures for evaluation runs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cascade import CTSS_THRESHOLDS  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

CTSS_COLORS = ("#e8f4e8", "#fff6d5", "#fde2c8", "#f9c9c0", "#eab0c8")
PRED_COLOR = "tab:blue"
REF_COLOR = "tab:green"


def _table(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda r: "| " + " | ".join(str(c).ljust(w) for c, w in zip(r, widths)) + " |"  # noqa: E731
    return "\n".join([line, fmt(header), line, *map(fmt, rows), line])


def _pm(ms):
    return "n/a" if ms is None else f"{ms[0]:.2f} ± {ms[1]:.2f}"


def segmentation_table(summary) -> str:
    rows = []
    sources = sorted({c.source for c in summary.per_case})
    for src in sources:
        sub = [c for c in summary.per_case if c.source == src]
        lung = [c.dice_lung for c in sub if c.dice_lung is not None]
        lesion = [c.dice_lesion for c in sub if c.dice_lesion is not None]
        rows.append([src, _pm(_ms(lung)), _pm(_ms(lesion)), len(sub)])
    rows.append(["all", _pm(summary.lung_dice), _pm(summary.lesion_dice), len(summary.per_case)])
    return _table(["Test set", "Lung segmentation (Dice)", "Lesion segmentation (Dice)", "N"], rows)


def _ms(values):
    if not values:
        return None
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def quantification_table(summary) -> str:
    q = summary.quantification
    if q is None:
        return "no cases with reference percentages"
    rows = [[src, f"{mae:.2f}", q.counts[src]] for src, mae in sorted(q.per_source.items())]
    rows.append(["all", f"{q.mae:.2f}", q.n])
    return _table(["Dataset", "MAE of P (points)", "N"], rows)


def ctss_table(summary) -> str:
    if summary.ctss is None:
        return "no cases with reference CT-SS"
    rows = [[src, *s.table_row()] for src, s in summary.ctss_by_source.items()]
    rows.append(["all", *summary.ctss.table_row()])
    return _table(["Dataset", "Accuracy", "1-class misclassification", "2-class misclassification"], rows)


PER_CASE_FIELDS = ["case_id", "source", "dice_lung", "dice_lesion", "p_pred", "p_ref", "ct_ss_pred", "ct_ss_ref"]


def write_per_case_csv(summary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PER_CASE_FIELDS)
        w.writeheader()
        for c in summary.per_case:
            row = asdict(c)
            if row["ct_ss_ref"] is not None:
                row["ct_ss_ref"] = "|".join(str(r) for r in row["ct_ss_ref"])
            w.writerow(row)


def plot_percentage_scatter(summary, path) -> bool:
    """Predicted vs reference P with CT-SS bands; False when there is nothing to plot."""
    pts = [(c.p_ref, c.p_pred, c.source) for c in summary.per_case if c.p_ref is not None and c.p_pred is not None]
    if not pts:
        return False
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        edges = (0.0, *CTSS_THRESHOLDS, 100.0)
        hi = min(100.0, max(max(p[0], p[1]) for p in pts) * 1.15 + 2)
        for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            if a < hi:
                ax.axvspan(a, min(b, hi), color=CTSS_COLORS[k], zorder=0, lw=0)
                ax.text((a + min(b, hi)) / 2, hi * 0.97, f"{k + 1}", ha="center", va="top", fontsize=7, color="0.4")
        for src in sorted({p[2] for p in pts}):
            xs = [p[0] for p in pts if p[2] == src]
            ys = [p[1] for p in pts if p[2] == src]
            ax.scatter(xs, ys, s=14, label=src, zorder=3)
        ax.plot([0, hi], [0, hi], color="0.3", lw=0.8, ls="--", zorder=2)
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_xlabel("reference P (%)")
        ax.set_ylabel("predicted P (%)")
        ax.legend(loc="lower right", frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return True


def plot_overlay(image, pred_lung, ref_lung, pred_lesion, ref_lesion, path, n_slices: int = 3) -> None:
    """Axial slices (rows): image, lung contours, lesion contours (columns).

    Predicted contours are blue, reference contours green.
    """
    image = np.asarray(getattr(image, "voxels", image))
    masks = [np.asarray(getattr(m, "voxels", m)) if m is not None else None for m in (pred_lung, ref_lung, pred_lesion, ref_lesion)]
    support = masks[1] if masks[1] is not None else masks[0]
    zs = np.flatnonzero(support.any(axis=(0, 1))) if support is not None else np.arange(image.shape[2])
    if zs.size == 0:
        zs = np.arange(image.shape[2])
    picks = zs[np.linspace(0, zs.size - 1, n_slices + 2).round().astype(int)[1:-1]]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(picks), 3, figsize=(6.6, 2.2 * len(picks)), squeeze=False)
        for row, z in zip(axes, picks):
            sl = np.clip(image[:, :, z].T, -1000, 300)
            for ax in row:
                ax.imshow(sl, cmap="gray", origin="lower")
                ax.set_xticks([])
                ax.set_yticks([])
            for ax, (pred, ref) in zip(row[1:], ((masks[0], masks[1]), (masks[2], masks[3]))):
                for m, color in ((pred, PRED_COLOR), (ref, REF_COLOR)):
                    if m is not None and m[:, :, z].any():
                        ax.contour(m[:, :, z].T, levels=[0.5], colors=color, linewidths=0.8)
            row[0].set_ylabel(f"z = {z}")
        for ax, title in zip(axes[0], ("CT", "lungs", "lesions")):
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)


def write_report(summary, out_dir) -> dict:
    """summary.json, per_case.csv, tables.txt and figures under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    written["summary"] = out / "summary.json"
    write_per_case_csv(summary, out / "per_case.csv")
    written["per_case"] = out / "per_case.csv"
    text = "\n\n".join(
        [
            "Segmentation\n" + segmentation_table(summary),
            "Percentage of affected lung\n" + quantification_table(summary),
            "CT severity score\n" + ctss_table(summary),
        ]
    )
    (out / "tables.txt").write_text(text + "\n")
    written["tables"] = out / "tables.txt"
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    if plot_percentage_scatter(summary, figs / "p_scatter.png"):
        written["p_scatter"] = figs / "p_scatter.png"
    return written
