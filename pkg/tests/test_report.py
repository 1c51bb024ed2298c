import csv
import json
import math
import xml.etree.ElementTree as ET

import jsonschema
import numpy as np
import pytest

from deepclean.evaluate import binary_metrics, roc_auc, within_sample_metrics
from deepclean.report import (
    CSV_COLUMNS,
    REPORT_VERSION,
    MethodResult,
    SweepResults,
    emit_report,
    render_tables,
    to_document,
    validate_document,
)

LDS = (2, 5, 20)


def fake_results(single_class_at=None) -> SweepResults:
    rng = np.random.default_rng(0)
    out = []
    for ld in LDS:
        for method in ("pca", "vae"):
            labels = rng.random(40) < 0.3
            if ld == single_class_at and method == "vae":
                labels[:] = False
            scores = rng.exponential(size=40) + labels * (1.5 if method == "vae" else 0.3)
            m = binary_metrics(scores > 1.0, labels)
            roc = None
            if labels.any() and not labels.all():
                roc, auc = roc_auc(scores, labels)
                m = type(m)(*m.counts, auc=auc)
            truth = rng.random((40, 50)) < 0.2
            within = within_sample_metrics(truth ^ (rng.random((40, 50)) < 0.1), truth)
            x = rng.normal(size=1250)
            out.append(MethodResult(method, ld, m, within, {"sample_threshold": 1.0, "window_threshold": 2.0},
                                    roc, scores, labels, [(x, 0.9 * x)]))
    return SweepResults(out, {"seed": 3})


def test_json_report_validates_and_round_trips(tmp_path):
    p = emit_report(fake_results(), "json", tmp_path / "r.json")
    doc = json.loads(p.read_text())
    validate_document(doc)
    assert doc["report_version"] == REPORT_VERSION
    assert doc["latent_dims"] == list(LDS)
    assert len(doc["results"]) == len(LDS) * 2
    assert doc == to_document(fake_results())


def test_json_nan_becomes_null(tmp_path):
    p = emit_report(fake_results(single_class_at=5), "json", tmp_path / "r.json")
    doc = json.loads(p.read_text())
    row = next(r for r in doc["results"] if r["latent_dim"] == 5 and r["method"] == "vae")
    assert row["sample"]["auc"] is None and row["sample"]["sensitivity"] is None
    assert row["roc"] == {"fpr": [], "tpr": []}


def test_schema_rejects_bad_document():
    doc = to_document(fake_results())
    doc["results"][0]["sample"]["tp"] = -1
    with pytest.raises(jsonschema.ValidationError):
        validate_document(doc)


def test_csv_row_count_and_columns(tmp_path):
    p = emit_report(fake_results(), "csv", tmp_path / "r.csv")
    rows = list(csv.DictReader(open(p)))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == len(LDS) * 2
    assert {(int(r["latent_dim"]), r["method"]) for r in rows} == {(ld, m) for ld in LDS for m in ("pca", "vae")}


def test_svg_one_roc_polyline_per_latent_dim(tmp_path):
    p = emit_report(fake_results(), "svg", tmp_path / "r.svg")
    root = ET.parse(p).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    rocs = [e for e in root.iter(f"{ns}polyline") if e.get("class") == "roc"]
    assert sorted(int(e.get("data-latent-dim")) for e in rocs) == list(LDS)
    assert any(e.get("class") == "threshold" for e in root.iter(f"{ns}polyline"))
    assert any(e.get("class") == "reconstruction" for e in root.iter(f"{ns}polyline"))


def test_tables_layout():
    text = render_tables(fake_results())
    lines = [ln for ln in text.splitlines() if ln.startswith("| ")]
    assert lines[0].startswith("| Latent dim | Accuracy PCA | Accuracy VAE")
    assert [ln.split("|")[1].strip() for ln in lines[1:5]] == ["2", "5", "20", "Mean"]
    assert "Prop. 100% correct VAE" in text


def test_unknown_format_and_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report(fake_results(), "pdf", tmp_path / "x")
    with pytest.raises(ValueError):
        emit_report(SweepResults([]), "json", tmp_path / "x")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(fake_results(), "json", tmp_path / "missing" / "r.json")


def test_metrics_values_survive_json(tmp_path):
    res = fake_results()
    doc = json.loads(emit_report(res, "json", tmp_path / "r.json").read_text())
    for r, row in zip(res.results, doc["results"]):
        assert math.isclose(row["sample"]["auc"], r.metrics.auc)
        assert row["sample"]["tp"] == r.metrics.tp
