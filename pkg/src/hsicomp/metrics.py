"""Confusion-matrix segmentation metrics: per-class IoU, gIoU and wIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray  # (K, K) int64

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))


def accumulate(pred, gt, k: int, ignore: int | None = None) -> ConfusionMatrix:
    """Joint label counts. Ground-truth pixels equal to ``ignore`` (default ``k``) are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    ignore = k if ignore is None else ignore
    keep = gt != ignore
    p, t = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    for name, lab in (("ground-truth", t), ("predicted", p)):
        bad = (lab < 0) | (lab >= k)
        if bad.any():
            raise LabelError(f"{name} label {lab[bad][0]} outside 0..{k - 1}")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


@dataclass
class ClassScores:
    iou: np.ndarray  # NaN where undefined
    precision: np.ndarray
    recall: np.ndarray


def _ratio(num, den):
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def iou(cm: ConfusionMatrix) -> ClassScores:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    return ClassScores(_ratio(tp, tp + fp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn))


@dataclass
class Aggregate:
    giou: float
    wiou: float


def aggregate(cm: ConfusionMatrix) -> Aggregate:
    """Frequency-weighted (gIoU) and inverse-frequency-weighted (wIoU) IoU.

    Only classes present in the ground truth carry weight.
    """
    scores = iou(cm).iou
    freq = cm.counts.sum(axis=1).astype(np.float64)
    present = freq > 0
    if not present.any():
        raise LabelError("no ground-truth pixels to aggregate")
    f = freq[present] / freq[present].sum()
    s = scores[present]
    inv = 1.0 / f
    return Aggregate(float((f * s).sum()), float((inv * s).sum() / inv.sum()))


def evaluate(preds, gts, k: int) -> tuple[ConfusionMatrix, ClassScores, Aggregate]:
    cm = ConfusionMatrix.zeros(k)
    for p, t in zip(preds, gts):
        cm = cm + accumulate(p, t, k)
    return cm, iou(cm), aggregate(cm)


def report(cm: ConfusionMatrix, names=None) -> str:
    """Per-class precision/recall/IoU table with global and weighted rows, in percent."""
    s = iou(cm)
    agg = aggregate(cm)
    names = names or [f"class_{i}" for i in range(cm.classes)]
    lines = [f"{'class':<14}{'precision':>10}{'recall':>10}{'IoU':>10}"]
    for i, name in enumerate(names):
        fmt = lambda v: f"{100 * v:10.2f}" if np.isfinite(v) else f"{'n/a':>10}"
        lines.append(f"{name:<14}{fmt(s.precision[i])}{fmt(s.recall[i])}{fmt(s.iou[i])}")
    lines.append(f"{'Global':<14}{'':>20}{100 * agg.giou:10.2f}")
    lines.append(f"{'Weighted':<14}{'':>20}{100 * agg.wiou:10.2f}")
    return "\n".join(lines)
