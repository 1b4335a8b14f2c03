"""Panoptic quality with dataset-level aggregation (mPQ+) and count R^2."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES, count_ground_truth
from .errors import EmptyDataset, LengthMismatch, TooFewPatches

IOU_THRESHOLD = 0.5


@dataclass
class ClassMatch:
    """Matching of one class in one image."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (pred, gt, iou)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)

    @property
    def iou_sum(self) -> float:
        return float(sum(p[2] for p in self.pairs))


def _restrict(instances, label_classes: dict[int, int], c: int) -> np.ndarray:
    keep = [l for l, k in label_classes.items() if k == c]
    inst = np.asarray(instances).astype(np.int64)
    if not keep:
        return np.zeros_like(inst)
    lut = np.zeros(int(inst.max()) + 1, dtype=np.int64)
    keep = [l for l in keep if l < lut.size]
    lut[keep] = keep
    return lut[inst]


def match_instances(pred_instances, pred_classes, gt_instances, gt_classes, c: int) -> ClassMatch:
    """Match class-``c`` predictions to class-``c`` ground truth at IoU > 0.5.

    With strict IoU > 0.5 no instance can match two counterparts, so the
    matching is a plain threshold on the intersection table.
    """
    p = _restrict(pred_instances, pred_classes, c).ravel()
    g = _restrict(gt_instances, gt_classes, c).ravel()
    p_labels = [int(l) for l in np.unique(p) if l > 0]
    g_labels = [int(l) for l in np.unique(g) if l > 0]
    result = ClassMatch()
    if not p_labels or not g_labels:
        result.fp, result.fn = p_labels, g_labels
        return result
    p_area = np.bincount(p)
    g_area = np.bincount(g)
    both = (p > 0) & (g > 0)
    key = p[both] * (int(g.max()) + 1) + g[both]
    keys, inter = np.unique(key, return_counts=True)
    matched_p, matched_g = set(), set()
    for k, i in zip(keys, inter):
        pl, gl = divmod(int(k), int(g.max()) + 1)
        iou = i / (p_area[pl] + g_area[gl] - i)
        if iou > IOU_THRESHOLD:
            result.pairs.append((pl, gl, float(iou)))
            matched_p.add(pl)
            matched_g.add(gl)
    result.fp = [l for l in p_labels if l not in matched_p]
    result.fn = [l for l in g_labels if l not in matched_g]
    return result


def panoptic_quality(iou_sum: float, tp: int, fp: int, fn: int) -> float:
    """PQ = sum(IoU) / (TP + FP/2 + FN/2); NaN when nothing was present."""
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return math.nan
    return iou_sum / denom


def mpq_plus(matches, strict_six_class: bool = False):
    """Aggregate per-class statistics over all images, then average the PQs.

    ``matches`` is a sequence (one entry per image) of length-6 sequences of
    :class:`ClassMatch`. Classes with no instance anywhere are left out of
    the mean unless ``strict_six_class`` is set, in which case they count 0.
    """
    matches = list(matches)
    if not matches:
        raise EmptyDataset("mPQ+ needs at least one image")
    per_class = []
    for c in range(NUM_CLASSES):
        iou = sum(m[c].iou_sum for m in matches)
        tp = sum(len(m[c].pairs) for m in matches)
        fp = sum(len(m[c].fp) for m in matches)
        fn = sum(len(m[c].fn) for m in matches)
        per_class.append(panoptic_quality(iou, tp, fp, fn))
    if strict_six_class:
        values = [0.0 if math.isnan(v) else v for v in per_class]
    else:
        values = [v for v in per_class if not math.isnan(v)]
    mean = float(np.mean(values)) if values else math.nan
    return per_class, mean


def r2_counts(pred_counts, gt_counts):
    """Per-class coefficient of determination of cell counts across patches.

    A class with zero count variance scores 1 if predicted exactly, else 0.
    """
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth count vectors")
    if gt.shape[0] < 2:
        raise TooFewPatches("R^2 needs at least two patches")
    ss_res = ((pred - gt) ** 2).sum(axis=0)
    ss_tot = ((gt - gt.mean(axis=0)) ** 2).sum(axis=0)
    per_class = []
    for res, tot in zip(ss_res, ss_tot):
        if tot == 0:
            per_class.append(1.0 if res == 0 else 0.0)
        else:
            per_class.append(float(1.0 - res / tot))
    return per_class, float(np.mean(per_class))


@dataclass
class MetricsReport:
    per_class_pq: list[float]
    mpq_plus: float
    per_class_r2: list[float]
    multi_r2: float
    pred_counts: list[list[int]]
    gt_counts: list[list[int]]

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        return {
            "class_names": list(CLASS_NAMES),
            "per_class_pq": [clean(v) for v in self.per_class_pq],
            "mpq_plus": clean(self.mpq_plus),
            "per_class_r2": [clean(v) for v in self.per_class_r2],
            "multi_r2": clean(self.multi_r2),
            "patch_count": len(self.gt_counts),
        }

    def save(self, json_path, csv_path) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["patch_id", "class", "gt_count", "pred_count"])
            for i, (g, p) in enumerate(zip(self.gt_counts, self.pred_counts)):
                for c in range(NUM_CLASSES):
                    writer.writerow([i, CLASS_NAMES[c], g[c], p[c]])


METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["per_class_pq", "mpq_plus", "per_class_r2", "multi_r2"],
    "properties": {
        "class_names": {"type": "array", "items": {"type": "string"}, "minItems": 6, "maxItems": 6},
        "per_class_pq": {
            "type": "array", "minItems": 6, "maxItems": 6,
            "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        },
        "mpq_plus": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "per_class_r2": {
            "type": "array", "minItems": 6, "maxItems": 6,
            "items": {"type": ["number", "null"], "maximum": 1},
        },
        "multi_r2": {"type": ["number", "null"], "maximum": 1},
        "patch_count": {"type": "integer", "minimum": 0},
    },
}


def evaluate(dataset, predictions, strict_six_class: bool = False) -> MetricsReport:
    """Score SegmentationResults against their ground-truth patches.

    With fewer than two patches the R^2 fields are NaN.
    """
    dataset = list(dataset)
    predictions = list(predictions)
    if len(dataset) != len(predictions):
        raise LengthMismatch(f"{len(dataset)} patches vs {len(predictions)} predictions")
    matches = []
    for patch, pred in zip(dataset, predictions):
        gt_classes = patch.instance_classes()
        matches.append([
            match_instances(pred.instances, pred.instance_classes, patch.instances, gt_classes, c)
            for c in range(1, NUM_CLASSES + 1)
        ])
    per_class_pq, mpq = mpq_plus(matches, strict_six_class)
    gt_counts = [count_ground_truth(p).tolist() for p in dataset]
    pred_counts = [np.asarray(r.counts).tolist() for r in predictions]
    if len(dataset) >= 2:
        per_class_r2, multi = r2_counts(pred_counts, gt_counts)
    else:
        per_class_r2, multi = [math.nan] * NUM_CLASSES, math.nan
    return MetricsReport(per_class_pq, mpq, per_class_r2, multi, pred_counts, gt_counts)


def format_table(rows) -> str:
    """Table laid out as (set, mPQ+, mPQ+ tta, R2, R2 tta).

    ``rows`` holds ``(name, plain_report, tta_report_or_None)``.
    """
    def fmt(v):
        return "-" if v is None or math.isnan(v) else f"{v:.4f}"

    header = f"{'set':<16} {'mPQ+':>8} {'mPQ+ tta':>9} {'R2':>8} {'R2 tta':>8}"
    lines = [header]
    for name, plain, tta in rows:
        lines.append(
            f"{name:<16} {fmt(plain.mpq_plus):>8} "
            f"{fmt(tta.mpq_plus if tta else None):>9} "
            f"{fmt(plain.multi_r2):>8} {fmt(tta.multi_r2 if tta else None):>8}"
        )
    return "\n".join(lines)
