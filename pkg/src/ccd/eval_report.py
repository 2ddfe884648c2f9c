"""Per-class average precision, mAP, and diagnostic reports.

AP is all-point (non-interpolated): items sorted by score descending with
ties broken by stable original order, AP = sum of precision-at-hit times the
1/P recall increment. Classes with zero positives are skipped, not scored 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .debias import BiasVector
from .errors import DataError
from .pseudo_label import PseudoLabelSet


@dataclass
class EvalResult:
    per_class_ap: list[float]          # nan for skipped classes
    mean: float
    skipped_classes: list[int] = field(default_factory=list)

    def to_json(self, class_names: list[str] | None = None) -> dict:
        names = class_names or [f"class_{i}" for i in range(len(self.per_class_ap))]
        return {
            "map": self.mean,
            "per_class": {
                name: (None if i in self.skipped_classes else self.per_class_ap[i])
                for i, name in enumerate(names)
            },
            "skipped_classes": [names[i] for i in self.skipped_classes],
        }


def average_precision(scores: np.ndarray, gt: np.ndarray) -> float:
    """All-point AP of one class; requires at least one positive."""
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gt)
    if s.shape != g.shape or s.ndim != 1:
        raise DataError(f"scores/gt shape mismatch: {s.shape} vs {g.shape}")
    if not np.all(np.isin(g, (0, 1))):
        raise DataError("gt must be binary")
    positives = int(g.sum())
    if positives == 0:
        raise DataError("average precision undefined with zero positives")
    order = np.argsort(-s, kind="stable")
    hits = g[order].astype(np.float64)
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1, dtype=np.float64)
    precision_at_hits = (cum / ranks)[hits == 1]
    return float(precision_at_hits.sum() / positives)


def evaluate(scores: np.ndarray, gt: np.ndarray) -> EvalResult:
    """Per-class AP over (n_images, C) score and binary gt matrices."""
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gt)
    if s.shape != g.shape or s.ndim != 2:
        raise DataError(f"scores/gt must be matching 2-D arrays, got {s.shape} vs {g.shape}")
    aps: list[float] = []
    skipped: list[int] = []
    for c in range(s.shape[1]):
        if g[:, c].sum() == 0:
            aps.append(float("nan"))
            skipped.append(c)
        else:
            aps.append(average_precision(s[:, c], g[:, c]))
    return EvalResult(per_class_ap=aps, mean=mean_ap(aps), skipped_classes=skipped)


def mean_ap(per_class: list[float]) -> float:
    """Arithmetic mean over non-skipped (non-nan) class APs."""
    vals = [a for a in per_class if not np.isnan(a)]
    if not vals:
        raise DataError("all classes skipped; mAP undefined")
    return float(np.mean(vals))


def bias_report(labels: PseudoLabelSet, bias: BiasVector,
                class_names: list[str]) -> tuple[dict, str]:
    """Per-class mean top-1 probability and top-1 counts, as JSON dict + CSV text.

    The unfiltered columns describe every sample's top-1 vote; the bias/count
    columns reflect only entropy-admitted samples.
    """
    if labels.n_classes != len(class_names) or bias.bias.shape[0] != len(class_names):
        raise DataError("class count mismatch between labels, bias, and names")
    probs = labels.probs
    top = probs.argmax(axis=1)
    top_p = probs[np.arange(len(top)), top]
    counts_all = np.bincount(top, minlength=labels.n_classes)
    mean_all = np.zeros(labels.n_classes)
    np.add.at(mean_all, top, top_p)
    seen = counts_all > 0
    mean_all[seen] = mean_all[seen] / counts_all[seen]

    doc = {
        "n_images": labels.n_images,
        "n_filtered": int(bias.n_filtered),
        "classes": [
            {
                "name": name,
                "bias": float(bias.bias[i]),
                "admitted_count": int(bias.counts[i]),
                "top1_count": int(counts_all[i]),
                "mean_top1": float(mean_all[i]) if seen[i] else None,
            }
            for i, name in enumerate(class_names)
        ],
    }
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["class", "bias", "admitted_count", "top1_count", "mean_top1"])
    for row in doc["classes"]:
        writer.writerow([row["name"], row["bias"], row["admitted_count"],
                         row["top1_count"], "" if row["mean_top1"] is None else row["mean_top1"]])
    return doc, buf.getvalue()


def format_ap_table(result: EvalResult, class_names: list[str]) -> str:
    """Plain-text per-class AP table with the mAP line at the bottom."""
    width = max(len(n) for n in class_names + ["class"])
    lines = [f"{'class':<{width}}  AP"]
    for i, name in enumerate(class_names):
        ap = result.per_class_ap[i]
        lines.append(f"{name:<{width}}  " + ("skipped" if np.isnan(ap) else f"{ap:.4f}"))
    lines.append(f"{'mAP':<{width}}  {result.mean:.4f}")
    return "\n".join(lines)


def eval_to_csv(result: EvalResult, class_names: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["class", "ap"])
    for i, name in enumerate(class_names):
        ap = result.per_class_ap[i]
        writer.writerow([name, "" if np.isnan(ap) else ap])
    writer.writerow(["mAP", result.mean])
    return buf.getvalue()


def dump_json(doc: dict) -> str:
    """Canonical JSON used for all report artifacts (stable bytes across runs)."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
