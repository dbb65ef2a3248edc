"""Classifier scoring: confusion matrices, per-class F1, the product-form
combined score, and the binary collapse of the six connectivity labels.

Labels 1..3 mean the channel is disconnected from the main stem, 4..6 mean
connected; the binary view groups them accordingly. All 0/0 cases score 0
and are marked degenerate rather than raising.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from streamgate.catalog import CatalogError

BINARY_NAMES = {1: "disconnected", 2: "connected"}


class MetricsError(CatalogError):
    """Invalid labels or shapes in scoring."""


class ClassScore(NamedTuple):
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool


def confusion(truth, predicted, m: int) -> np.ndarray:
    """m x m count matrix; rows are true labels, columns predicted, both
    1-based in 1..m."""
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise MetricsError("truth and predictions must be equal-length vectors")
    if m < 2:
        raise MetricsError("m must be at least 2")
    for arr, name in ((t, "truth"), (p, "prediction")):
        if arr.size and (arr.min() < 1 or arr.max() > m):
            raise MetricsError(f"{name} labels outside 1..{m}")
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def class_f1(cm: np.ndarray, label: int) -> ClassScore:
    """Precision/recall/F1 for one 1-based label from a confusion matrix.

    A missing denominator (no predictions for the class, no true members,
    or precision + recall both zero) yields 0 and sets degenerate.
    """
    m = cm.shape[0]
    if not 1 <= label <= m:
        raise MetricsError(f"label {label} outside 1..{m}")
    i = label - 1
    tp = float(cm[i, i])
    fp = float(cm[:, i].sum() - cm[i, i])
    fn = float(cm[i, :].sum() - cm[i, i])
    degenerate = False
    if tp + fp == 0.0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0.0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ClassScore(precision, recall, f1, int(tp + fn), degenerate)


def combined_f1(f1_scores) -> float:
    """m * product(F1) / sum(F1) over the per-class F1 scores.

    Any zero score zeroes the whole thing (and would zero the product
    anyway; the early return avoids 0/0 when all scores are zero). For
    m = 2 this is exactly the harmonic mean of the two scores.
    """
    scores = [float(s) for s in f1_scores]
    if len(scores) < 2:
        raise MetricsError("need at least two per-class scores")
    if any(s == 0.0 for s in scores):
        return 0.0
    return len(scores) * math.prod(scores) / sum(scores)


def harmonic_f1(f1_scores) -> float:
    """Classic harmonic mean of the per-class F1 scores; 0 if any is 0."""
    scores = [float(s) for s in f1_scores]
    if len(scores) < 2:
        raise MetricsError("need at least two per-class scores")
    if any(s == 0.0 for s in scores):
        return 0.0
    return len(scores) / sum(1.0 / s for s in scores)


def collapse_binary(label: int) -> int:
    """Six-class connectivity label -> binary: {1,2,3} -> 1 (disconnected),
    {4,5,6} -> 2 (connected)."""
    if label in (1, 2, 3):
        return 1
    if label in (4, 5, 6):
        return 2
    raise MetricsError(f"label {label} outside 1..6")


def _section(truth: list[int], predicted: list[int], m: int, names: Optional[dict] = None) -> dict:
    cm = confusion(truth, predicted, m)
    scores = [class_f1(cm, label) for label in range(1, m + 1)]
    f1s = [s.f1 for s in scores]
    n = int(cm.sum())
    accuracy = float(np.trace(cm)) / n if n else 0.0
    per_class = []
    for label, s in zip(range(1, m + 1), scores):
        row = {
            "label": label,
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "support": s.support,
            "degenerate": s.degenerate,
        }
        if names:
            row["name"] = names[label]
        per_class.append(row)
    return {
        "m": m,
        "confusion": cm.tolist(),
        "per_class": per_class,
        "accuracy": accuracy,
        "combined_f1": combined_f1(f1s),
        "combined_f1_harmonic": harmonic_f1(f1s),
    }


def evaluate(predictions: dict[str, int], truth: dict[str, int], m: int = 6) -> dict:
    """Score predictions against truth, joined on record id.

    Truth labels always come from the catalog's six-label scale. With
    m = 6 the predictions use the same scale and a binary section is added
    by collapsing both sides; with m = 2 the predictions are already
    binary, so only the truth side is collapsed. Records present on only
    one side are counted, not scored.
    """
    shared = sorted(set(predictions) & set(truth))
    if not shared:
        raise MetricsError("no record ids shared between predictions and truth")
    t = [truth[rid] for rid in shared]
    p = [predictions[rid] for rid in shared]
    report = {
        "n_evaluated": len(shared),
        "n_missing_truth": len(set(predictions) - set(truth)),
        "n_missing_prediction": len(set(truth) - set(predictions)),
    }
    if m == 6:
        report["multiclass"] = _section(t, p, m)
        bt = [collapse_binary(x) for x in t]
        bp = [collapse_binary(x) for x in p]
        report["binary"] = _section(bt, bp, 2, BINARY_NAMES)
    elif m == 2:
        bt = [collapse_binary(x) for x in t]
        report["multiclass"] = _section(bt, p, 2, BINARY_NAMES)
        report["binary"] = report["multiclass"]
    else:
        report["multiclass"] = _section(t, p, m)
        report["binary"] = None
    return report


def write_report_json(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_report_csv(report: dict, path) -> None:
    """One row per class per section: section,label,name,precision,recall,
    f1,support,degenerate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["section", "label", "name", "precision", "recall", "f1", "support", "degenerate"]
        )
        for section in ("multiclass", "binary"):
            block = report.get(section)
            if not block:
                continue
            for row in block["per_class"]:
                writer.writerow(
                    [
                        section,
                        row["label"],
                        row.get("name", ""),
                        format(row["precision"], ".6f"),
                        format(row["recall"], ".6f"),
                        format(row["f1"], ".6f"),
                        row["support"],
                        int(row["degenerate"]),
                    ]
                )


def write_report_svg(report: dict, path) -> None:
    """Per-class F1 bar chart, written directly so reruns are byte-stable."""
    block = report["multiclass"]
    rows = block["per_class"]
    width, height = 520, 300
    margin_l, margin_b, margin_t = 50, 40, 30
    plot_w = width - margin_l - 20
    plot_h = height - margin_t - margin_b
    n = len(rows)
    slot = plot_w / n
    bar_w = slot * 0.6

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin_l}" y="18" font-family="sans-serif" font-size="13">'
        "Per-class F1</text>",
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin_t + plot_h * (1.0 - frac)
        parts.append(
            f'<line x1="{margin_l}" y1="{y:.1f}" x2="{margin_l + plot_w}" y2="{y:.1f}" '
            'stroke="#cccccc" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{margin_l - 6}" y="{y + 4:.1f}" font-family="sans-serif" '
            f'font-size="10" text-anchor="end">{frac:.2f}</text>'
        )
    for i, row in enumerate(rows):
        x = margin_l + slot * i + (slot - bar_w) / 2
        h = plot_h * row["f1"]
        y = margin_t + plot_h - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" '
            'fill="#4878a8"/>'
        )
        label = row.get("name", str(row["label"]))
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{margin_t + plot_h + 14}" '
            f'font-family="sans-serif" font-size="10" text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" font-family="sans-serif" '
            f'font-size="9" text-anchor="middle">{row["f1"]:.3f}</text>'
        )
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def write_predictions_csv(rows: list[tuple[str, int, float]], path) -> None:
    """rows: (record id, predicted label, confidence of that label)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "confidence"])
        for rid, label, conf in rows:
            writer.writerow([rid, label, format(conf, ".6f")])


def read_predictions_csv(path) -> dict[str, int]:
    preds: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rid = row.get("id", "").strip()
            raw = row.get("label", "").strip()
            if not rid or not raw:
                continue
            preds[rid] = int(raw)
    return preds
