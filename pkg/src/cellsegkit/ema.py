"""EMA tracking of validation Dice with outlier rejection and best-epoch selection."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

TRACE_FIELDS = ("epoch", "raw_dice", "ema_dice", "outlier")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    raw_dice: float
    ema_dice: float
    residual: float
    outlier: bool


@dataclass
class ValidationTrace:
    alpha: float = 0.9
    outlier_k: float = 3.0
    outlier_floor: float = 0.05
    min_history: int = 3
    records: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.outlier_k < 0 or self.outlier_floor < 0:
            raise ValueError("outlier_k and outlier_floor must be >= 0")

    @property
    def ema(self):
        return self.records[-1].ema_dice if self.records else None

    def threshold(self):
        """Residual magnitude beyond which a drop is flagged, or None while
        there is too little history."""
        # the first record only seeds the EMA; its zero residual is not a measurement
        prior = [r for r in self.records[1:] if not r.outlier]
        if len(prior) < self.min_history:
            return None
        return max(self.outlier_floor, self.outlier_k * float(np.std([r.residual for r in prior])))


def _check_value(raw):
    raw = float(raw)
    if not (math.isfinite(raw) and 0.0 <= raw <= 1.0):
        raise ValueError(f"validation value must be in [0, 1], got {raw}")
    return raw


def detect_outlier(trace, raw):
    """True when ``raw`` falls below the current EMA by more than
    ``max(outlier_floor, outlier_k * std(prior inlier residuals))``.

    Only drops are flagged: during the early rise of training the EMA lags
    the raw values by design, and flagging improvements would freeze it.
    """
    raw = _check_value(raw)
    thr = trace.threshold()
    if thr is None:
        return False
    return raw - trace.ema < -thr


def ema_update(trace, raw, epoch=None):
    """Ingest one validation value and return its record. Outliers are
    recorded with the EMA carried over unchanged."""
    raw = _check_value(raw)
    epoch = len(trace.records) + 1 if epoch is None else int(epoch)
    if not trace.records:
        rec = EpochRecord(epoch, raw, raw, 0.0, False)
    else:
        residual = raw - trace.ema
        if detect_outlier(trace, raw):
            rec = EpochRecord(epoch, raw, trace.ema, residual, True)
        else:
            rec = EpochRecord(epoch, raw, trace.alpha * trace.ema + (1 - trace.alpha) * raw, residual, False)
    trace.records.append(rec)
    return rec


def select_best(trace, by="ema"):
    """Epoch with the highest EMA among non-outlier epochs; ties go to the
    later epoch. ``by="raw"`` ranks every epoch by its raw value instead."""
    if by == "raw":
        pool = list(trace.records)
        key = "raw_dice"
    elif by == "ema":
        pool = [r for r in trace.records if not r.outlier]
        key = "ema_dice"
    else:
        raise ValueError(f"unknown selection rule {by!r}")
    if not pool:
        raise ValueError("no eligible epoch to select")
    best = pool[0]
    for r in pool[1:]:
        if getattr(r, key) >= getattr(best, key):
            best = r
    return best.epoch


def trace_to_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for r in trace.records:
        w.writerow([r.epoch, repr(r.raw_dice), repr(r.ema_dice), int(r.outlier)])
    return buf.getvalue()


def trace_from_csv(text, **kw):
    trace = ValidationTrace(**kw)
    rows = list(csv.DictReader(io.StringIO(text)))
    prev_ema = None
    for row in rows:
        raw, ema = float(row["raw_dice"]), float(row["ema_dice"])
        residual = 0.0 if prev_ema is None else raw - prev_ema
        trace.records.append(EpochRecord(int(row["epoch"]), raw, ema, residual, row["outlier"] == "1"))
        prev_ema = ema
    return trace
