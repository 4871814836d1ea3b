import csv
import json

import jsonschema
import numpy as np
from PIL import Image

from lungquant.cli import load_schema
from lungquant.evaluation import CaseEvaluation, summarize
from lungquant.report import ctss_table, plot_overlay, segmentation_table, write_report


def fixture_summary():
    cases = [CaseEvaluation(f"c{i}", "coronacases", 0.95, 0.7, 10.0 + i, 10.0, 2, [2]) for i in range(9)]
    cases.append(CaseEvaluation("c9", "mosmed", 0.9, None, 30.0, 20.0, 3, [1, 2]))
    return summarize(cases)


def test_ctss_table_layout():
    text = ctss_table(fixture_summary())
    header = text.splitlines()[1]
    assert [c.strip() for c in header.strip("|").split("|")] == ["Dataset", "Accuracy", "1-class misclassification", "2-class misclassification"]
    assert "9/9" in text and "1/1" in text and "9/10" in text


def test_segmentation_table_rows():
    text = segmentation_table(fixture_summary())
    assert "0.95 ± 0.00" in text and "n/a" in text


def test_write_report(tmp_path):
    s = fixture_summary()
    written = write_report(s, tmp_path)
    doc = json.loads((tmp_path / "summary.json").read_text())
    jsonschema.validate(doc, load_schema("evaluation_summary"))
    assert doc["ctss"]["correct"] == 9 and doc["ctss"]["misclassification"] == {"1": 1}
    rows = list(csv.DictReader(open(tmp_path / "per_case.csv")))
    assert len(rows) == 10 and rows[-1]["ct_ss_ref"] == "1|2"
    assert Image.open(written["p_scatter"]).size[0] > 100


def test_overlay_png(tmp_path, lesion_phantom):
    ph = lesion_phantom
    plot_overlay(ph.volume, ph.lung, ph.lung, ph.lesion, None, tmp_path / "o.png")
    img = np.asarray(Image.open(tmp_path / "o.png"))
    assert img.ndim == 3 and img.shape[0] > 100
