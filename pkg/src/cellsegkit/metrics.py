"""Raster validation and segmentation metrics.

Images are ``(H, W, C)`` float arrays in [0, 1] (channel-last, row-major),
masks are ``(H, W)`` arrays of exact 0/1 values and logit maps are ``(H, W)``
finite reals. The helpers below check those invariants and return normalized
arrays; the metric functions take masks of identical shape.
"""
from dataclasses import dataclass

import numpy as np

METRIC_FIELDS = ("dice", "iou", "precision", "recall", "tp", "fp", "fn", "tn")


class ShapeMismatchError(ValueError):
    pass


def as_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] not in (3, 4):
        raise ValueError(f"image must be HxWxC with C in (3, 4), got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return image


def as_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be HxW, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8)


def as_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain NaN or Inf")
    return logits


def threshold_logits(logits):
    """Binarize at probability 0.5, i.e. ``logit >= 0``."""
    return (np.asarray(logits) >= 0).astype(np.uint8)


def _check_pair(pred, target):
    pred, target = as_mask(pred), as_mask(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred.astype(bool), target.astype(bool)


def confusion_counts(pred, target):
    p, t = _check_pair(pred, target)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def dice_score(pred, target, smooth=0.0):
    if smooth < 0:
        raise ValueError("smooth must be >= 0")
    tp, fp, fn, _ = confusion_counts(pred, target)
    denom = 2 * tp + fp + fn + smooth
    if denom == 0:
        return 1.0
    return (2 * tp + smooth) / denom


def iou_score(pred, target, smooth=0.0):
    if smooth < 0:
        raise ValueError("smooth must be >= 0")
    tp, fp, fn, _ = confusion_counts(pred, target)
    denom = tp + fp + fn + smooth
    if denom == 0:
        return 1.0
    return (tp + smooth) / denom


def precision_recall(pred, target):
    # an empty denominator means nothing to be wrong about -> 1.0
    tp, fp, fn, _ = confusion_counts(pred, target)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


@dataclass(frozen=True)
class MetricReport:
    dice: float
    iou: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred, target, smooth=0.0):
        tp, fp, fn, tn = confusion_counts(pred, target)
        return cls.from_counts(tp, fp, fn, tn, smooth)

    @classmethod
    def from_counts(cls, tp, fp, fn, tn, smooth=0.0):
        d = 2 * tp + fp + fn + smooth
        u = tp + fp + fn + smooth
        return cls(
            dice=(2 * tp + smooth) / d if d else 1.0,
            iou=(tp + smooth) / u if u else 1.0,
            precision=tp / (tp + fp) if tp + fp else 1.0,
            recall=tp / (tp + fn) if tp + fn else 1.0,
            tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn),
        )

    def as_row(self):
        return ([repr(float(getattr(self, k))) for k in METRIC_FIELDS[:4]]
                + [str(getattr(self, k)) for k in METRIC_FIELDS[4:]])

    def to_csv(self):
        return ",".join(METRIC_FIELDS) + "\n" + ",".join(self.as_row()) + "\n"

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln]
        header = lines[0].split(",")
        if tuple(header) != METRIC_FIELDS:
            raise ValueError(f"unexpected metric header {header}")
        vals = lines[1].split(",")
        kw = {k: (float(v) if i < 4 else int(v)) for i, (k, v) in enumerate(zip(header, vals))}
        return cls(**kw)


def summarize(reports):
    """Mean and population std of each ratio metric over per-image reports,
    plus pooled (micro-averaged) metrics from the summed counts."""
    out = {}
    for key in ("dice", "iou", "precision", "recall"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        out[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
    counts = [sum(getattr(r, k) for r in reports) for k in ("tp", "fp", "fn", "tn")]
    out["pooled"] = MetricReport.from_counts(*counts)
    return out
