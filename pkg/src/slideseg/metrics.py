"""Pixel-level segmentation metrics: confusion counts per slide plus the
eight derived scores, micro-averaged across slides by summing counts first.

Counts are Python ints (arbitrary precision), so gigapixel totals and the
products inside MCC/Kappa never overflow. Each 0/0 case is pinned to 0 and
flagged rather than left to float NaNs; Kappa with p_e = 1 is 1 when the
observed agreement is also perfect, else 0, likewise flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

METRIC_NAMES = ("f_score", "mcc", "kappa", "iou", "sensitivity",
                "specificity", "precision", "accuracy")

# Label order of the one-line summary, matching the reference reporting style.
_SUMMARY = (("F-score", "f_score"), ("MCC", "mcc"), ("Kappa", "kappa"),
            ("IOU", "iou"), ("Sensitivity", "sensitivity"),
            ("Specificity", "specificity"), ("Precision", "precision"),
            ("Accuracy", "accuracy"))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    f_score: float
    mcc: float
    kappa: float
    iou: float
    sensitivity: float
    specificity: float
    precision: float
    accuracy: float
    scope: str = "per-slide"  # or "micro-average"
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    def to_jsonable(self) -> dict:
        out = {"scope": self.scope,
               "counts": {"tp": self.counts.tp, "fp": self.counts.fp,
                          "fn": self.counts.fn, "tn": self.counts.tn}}
        for name in METRIC_NAMES:
            out[name] = getattr(self, name)
        out["degenerate"] = list(self.degenerate)
        return out

    def summary(self, digits: int = 3) -> str:
        parts = [f"{label}={getattr(self, attr):.{digits}f}"
                 for label, attr in _SUMMARY]
        return " | ".join(parts)


def confusion(gt: np.ndarray, pred: np.ndarray, class_id: int) -> ConfusionCounts:
    """One-vs-rest confusion of two label rasters at `class_id`."""
    if gt.shape != pred.shape:
        raise ValidationError(
            f"mask dims differ: {gt.shape} vs {pred.shape}")
    g = gt == class_id
    p = pred == class_id
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    tn = g.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts, scope: str = "per-slide") -> MetricsReport:
    total = c.total
    if total == 0:
        raise ValidationError("empty confusion counts")
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    flags: list[str] = []
    f_score = _ratio(2 * tp, 2 * tp + fp + fn, "f_score", flags)
    iou = _ratio(tp, tp + fp + fn, "iou", flags)
    sensitivity = _ratio(tp, tp + fn, "sensitivity", flags)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    precision = _ratio(tp, tp + fp, "precision", flags)
    accuracy = (tp + tn) / total

    mcc_den2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_den2 == 0:
        flags.append("mcc")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(mcc_den2)

    # Kappa on exact integers: p_e = 1 iff pe_num == total^2.
    pe_num = (tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)
    po_num = tp + tn
    if pe_num == total * total:
        flags.append("kappa")
        kappa = 1.0 if po_num == total else 0.0
    else:
        kappa = (po_num * total - pe_num) / (total * total - pe_num)

    return MetricsReport(counts=c, f_score=f_score, mcc=mcc, kappa=kappa,
                         iou=iou, sensitivity=sensitivity,
                         specificity=specificity, precision=precision,
                         accuracy=accuracy, scope=scope,
                         degenerate=tuple(flags))


def micro_average(counts: list[ConfusionCounts]) -> MetricsReport:
    if not counts:
        raise ValidationError("micro_average needs at least one slide")
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return metrics(total, scope="micro-average")


def doc_layer_confusion(gt_doc, pred_doc, gt_layer: str, pred_layer: str,
                        dims: tuple[int, int],
                        band_rows: int = 2048) -> ConfusionCounts:
    """Binary confusion between one layer of each document, rasterized at
    level 0 over the full slide extent in horizontal bands (memory stays
    flat for arbitrarily large slides)."""
    from .annotations import rasterize  # local: metrics is imported by annotations users

    gt_doc.layer(gt_layer)
    pred_doc.layer(pred_layer)
    width, height = dims
    tp = fp = fn = tn = 0
    for y in range(0, height, band_rows):
        h = min(band_rows, height - y)
        window = (0, y, width, h)
        g = rasterize(gt_doc, 0, [gt_layer], window=window) > 0
        p = rasterize(pred_doc, 0, [pred_layer], window=window) > 0
        band_tp = int(np.count_nonzero(g & p))
        band_fp = int(np.count_nonzero(~g & p))
        band_fn = int(np.count_nonzero(g & ~p))
        tp += band_tp
        fp += band_fp
        fn += band_fn
        tn += g.size - band_tp - band_fp - band_fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
