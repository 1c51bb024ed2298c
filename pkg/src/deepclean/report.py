"""JSON, CSV and SVG reports for a latent-dimension sweep.

CSV columns, in order::

    latent_dim, method, accuracy, sensitivity, specificity, auc, tp, fp, tn, fn,
    mean_prop_correct, mean_prop_artefact_correct, mean_prop_nonartefact_correct,
    prop_fully_correct, sample_threshold, window_threshold

Undefined rates are written as empty CSV fields and JSON ``null``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import jsonschema
import numpy as np

from .evaluate import BinaryMetrics, RocCurve, WithinSampleMetrics

REPORT_VERSION = 1

CSV_COLUMNS = (
    "latent_dim", "method", "accuracy", "sensitivity", "specificity", "auc", "tp", "fp", "tn", "fn",
    "mean_prop_correct", "mean_prop_artefact_correct", "mean_prop_nonartefact_correct",
    "prop_fully_correct", "sample_threshold", "window_threshold",
)

_NUM = {"type": ["number", "null"]}
_COUNT = {"type": "integer", "minimum": 0}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["report_version", "latent_dims", "methods", "results"],
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "latent_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "methods": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "meta": {"type": "object"},
        "results": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["latent_dim", "method", "sample", "within_sample", "thresholds", "roc"],
                "properties": {
                    "latent_dim": {"type": "integer", "minimum": 1},
                    "method": {"type": "string"},
                    "sample": {
                        "type": "object",
                        "required": ["accuracy", "sensitivity", "specificity", "auc", "tp", "fp", "tn", "fn"],
                        "properties": {
                            "accuracy": _NUM, "sensitivity": _NUM, "specificity": _NUM, "auc": _NUM,
                            "tp": _COUNT, "fp": _COUNT, "tn": _COUNT, "fn": _COUNT,
                        },
                    },
                    "within_sample": {
                        "type": "object",
                        "required": ["mean_prop_correct", "mean_prop_artefact_correct",
                                     "mean_prop_nonartefact_correct", "prop_fully_correct"],
                        "additionalProperties": _NUM,
                    },
                    "thresholds": {"type": "object"},
                    "roc": {
                        "type": "object",
                        "required": ["fpr", "tpr"],
                        "properties": {"fpr": {"type": "array", "items": {"type": "number"}},
                                       "tpr": {"type": "array", "items": {"type": "number"}}},
                    },
                },
            },
        },
    },
}


@dataclass
class MethodResult:
    method: str
    latent_dim: int
    metrics: BinaryMetrics
    within: WithinSampleMetrics
    thresholds: dict
    roc: RocCurve | None = None
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None
    examples: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


@dataclass
class SweepResults:
    results: list[MethodResult]
    meta: dict = field(default_factory=dict)

    @property
    def latent_dims(self) -> list[int]:
        return sorted({r.latent_dim for r in self.results})

    @property
    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.results:
            if r.method not in seen:
                seen.append(r.method)
        return seen


def _clean(value):
    """NaN/inf become None; numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def to_document(results: SweepResults) -> dict:
    rows = []
    for r in results.results:
        roc = {"fpr": [], "tpr": []}
        if r.roc is not None:
            roc = {"fpr": r.roc.fpr, "tpr": r.roc.tpr}
        rows.append({
            "latent_dim": r.latent_dim,
            "method": r.method,
            "sample": r.metrics.to_dict(),
            "within_sample": r.within.to_dict(),
            "thresholds": r.thresholds,
            "roc": roc,
        })
    return _clean({
        "report_version": REPORT_VERSION,
        "latent_dims": results.latent_dims,
        "methods": results.methods,
        "meta": results.meta,
        "results": rows,
    })


def validate_document(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def csv_rows(results: SweepResults) -> list[dict]:
    out = []
    for r in results.results:
        row = {"latent_dim": r.latent_dim, "method": r.method}
        row.update(r.metrics.to_dict())
        row.update(r.within.to_dict())
        row["sample_threshold"] = r.thresholds.get("sample_threshold")
        row["window_threshold"] = r.thresholds.get("window_threshold")
        out.append(_clean(row))
    return out


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - lo) / ((hi - lo) or 1.0) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - lo) / ((hi - lo) or 1.0) * self.h

    def frame(self, title, xlabel, ylabel) -> list[str]:
        return [
            f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" height="{_fmt(self.h)}" '
            'fill="none" stroke="#444"/>',
            f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 - 8)}" text-anchor="middle">{escape(title)}</text>',
            f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 + self.h + 28)}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="{_fmt(self.x0 - 34)}" y="{_fmt(self.y0 + self.h / 2)}" text-anchor="middle" '
            f'transform="rotate(-90 {_fmt(self.x0 - 34)} {_fmt(self.y0 + self.h / 2)})">{escape(ylabel)}</text>',
            f'<text x="{_fmt(self.x0)}" y="{_fmt(self.y0 + self.h + 14)}" font-size="9">{self.xlim[0]:.3g}</text>',
            f'<text x="{_fmt(self.x0 + self.w)}" y="{_fmt(self.y0 + self.h + 14)}" font-size="9" text-anchor="end">{self.xlim[1]:.3g}</text>',
            f'<text x="{_fmt(self.x0 - 4)}" y="{_fmt(self.y0 + self.h)}" font-size="9" text-anchor="end">{self.ylim[0]:.3g}</text>',
            f'<text x="{_fmt(self.x0 - 4)}" y="{_fmt(self.y0 + 9)}" font-size="9" text-anchor="end">{self.ylim[1]:.3g}</text>',
        ]

    def polyline(self, x, y, color, cls, width=1.0, extra="") -> str:
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.px(x), self.py(y)))
        return (f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" '
                f'stroke-width="{width}"{extra}/>')


def _reconstruction_panel(results: SweepResults, x0, y0, w, h) -> list[str]:
    examples = [(r, e) for r in results.results if r.method == "vae" for e in r.examples[:1]]
    if not examples:
        examples = [(r, e) for r in results.results for e in r.examples[:1]]
    out: list[str] = []
    if not examples:
        return out
    rows = len(examples)
    ph = (h - 30 * (rows - 1)) / rows
    for i, (r, (x, recon)) in enumerate(examples):
        n = len(x)
        lo = float(min(np.min(x), np.min(recon)))
        hi = float(max(np.max(x), np.max(recon)))
        p = _Panel(x0, y0 + i * (ph + 30), w, ph, (0, n / 125.0), (lo, hi))
        t = np.arange(n) / 125.0
        out += p.frame(f"{r.method} Ld={r.latent_dim}: window and reconstruction", "time (s)", "standardized")
        out.append(p.polyline(t, x, "#444", "signal", 0.8))
        out.append(p.polyline(t, recon, "#d62728", "reconstruction", 1.0))
    return out


def _strip_panel(results: SweepResults, x0, y0, w, h) -> list[str]:
    items = [r for r in results.results if r.scores is not None and r.method == "vae"]
    if not items:
        return []
    logs = [np.log10(np.maximum(r.scores, 1e-12)) for r in items]
    thr = [math.log10(max(r.thresholds.get("sample_threshold", 1e-12), 1e-12)) for r in items]
    lo = min(min(float(v.min()) for v in logs), min(thr))
    hi = max(max(float(v.max()) for v in logs), max(thr))
    p = _Panel(x0, y0, w, h, (0, len(items)), (lo - 0.1, hi + 0.1))
    out = p.frame("test log10 MSE by latent dimension (threshold dashed)", "latent dimension", "log10 MSE")
    jitter = np.random.default_rng(0)
    for i, (r, v, t) in enumerate(zip(items, logs, thr)):
        xs = i + 0.5 + jitter.uniform(-0.3, 0.3, v.size)
        lab = r.labels if r.labels is not None else np.zeros(v.size, dtype=bool)
        for a, b, pos in zip(p.px(xs), p.py(v), lab):
            color = "#d62728" if pos else "#1f77b4"
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="1.8" fill="{color}" fill-opacity="0.7"/>')
        out.append(p.polyline([i + 0.1, i + 0.9], [t, t], "#000", "threshold", 1.2, ' stroke-dasharray="4 2"'))
        out.append(f'<text x="{_fmt(float(p.px(i + 0.5)))}" y="{_fmt(y0 + h + 14)}" font-size="10" '
                   f'text-anchor="middle">{r.latent_dim}</text>')
    return out


def _roc_panel(results: SweepResults, x0, y0, w, h) -> list[str]:
    p = _Panel(x0, y0, w, h, (0, 1), (0, 1))
    out = p.frame("ROC (VAE); marker = calibrated threshold", "1 - specificity", "sensitivity")
    out.append(p.polyline([0, 1], [0, 1], "#bbb", "chance", 0.8, ' stroke-dasharray="3 3"'))
    vae = [r for r in results.results if r.method == "vae" and r.roc is not None]
    for i, r in enumerate(vae):
        color = _PALETTE[i % len(_PALETTE)]
        out.append(p.polyline(r.roc.fpr, r.roc.tpr, color, "roc", 1.4, f' data-latent-dim="{r.latent_dim}"'))
        fpr = 1 - r.metrics.specificity
        tpr = r.metrics.sensitivity
        if math.isfinite(fpr) and math.isfinite(tpr):
            out.append(f'<circle cx="{_fmt(float(p.px(fpr)))}" cy="{_fmt(float(p.py(tpr)))}" r="3" fill="{color}"/>')
        out.append(f'<text x="{_fmt(x0 + w - 90)}" y="{_fmt(y0 + h - 12 - 14 * i)}" font-size="10" fill="{color}">'
                   f'Ld={r.latent_dim} AUC={r.metrics.auc:.3f}</text>')
    return out


def render_svg(results: SweepResults) -> str:
    width, height = 760, 1180
    body = []
    body += _reconstruction_panel(results, 70, 40, 640, 380)
    body += _strip_panel(results, 70, 500, 640, 240)
    body += _roc_panel(results, 70, 820, 320, 320)
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n')
    return head + "\n".join(body) + "\n</svg>\n"


# ---------------------------------------------------------------------------
# markdown tables: one row per latent dimension, PCA and VAE side by side

_SAMPLE_COLS = (("Accuracy", "accuracy"), ("Sensitivity", "sensitivity"), ("Specificity", "specificity"),
                ("ROC AUC", "auc"))
_WITHIN_COLS = (("Entire sample", "mean_prop_correct"), ("Artefact w.s.", "mean_prop_artefact_correct"),
                ("Non-artefact w.s.", "mean_prop_nonartefact_correct"), ("Prop. 100% correct", "prop_fully_correct"))


def _cell(v) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def _table(results: SweepResults, cols, source: str, methods=("pca", "vae")) -> str:
    index = {(r.latent_dim, r.method): r for r in results.results}
    head = ["Latent dim"] + [f"{title} {m.upper()}" for title, _ in cols for m in methods]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    sums: dict = {}
    for ld in results.latent_dims:
        row = [str(ld)]
        for _, key in cols:
            for m in methods:
                r = index.get((ld, m))
                v = None
                if r is not None:
                    v = (r.metrics.to_dict() if source == "sample" else r.within.to_dict())[key]
                    if v is not None and not math.isnan(v):
                        sums.setdefault((key, m), []).append(v)
                row.append(_cell(v))
        lines.append("| " + " | ".join(row) + " |")
    mean = ["Mean"] + [_cell(float(np.mean(sums[(key, m)])) if sums.get((key, m)) else None)
                       for _, key in cols for m in methods]
    lines.append("| " + " | ".join(mean) + " |")
    return "\n".join(lines) + "\n"


def render_tables(results: SweepResults) -> str:
    return ("Sample-wide classification\n\n" + _table(results, _SAMPLE_COLS, "sample")
            + "\nWithin-sample localisation (mean proportion correctly identified)\n\n"
            + _table(results, _WITHIN_COLS, "within"))


# ---------------------------------------------------------------------------


def emit_report(results: SweepResults, format: str, path) -> Path:
    """Write ``results`` as ``json``, ``csv``, ``svg`` or markdown ``table`` to ``path``."""
    if not results.results:
        raise ValueError("no results to report")
    path = Path(path)
    if format == "json":
        doc = to_document(results)
        validate_document(doc)
        text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"
    elif format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in csv_rows(results):
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_COLUMNS})
        text = buf.getvalue()
    elif format == "svg":
        text = render_svg(results)
    elif format == "table":
        text = render_tables(results)
    else:
        raise ValueError(f"unknown report format {format!r}")
    path.write_text(text)
    return path
