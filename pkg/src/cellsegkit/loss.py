"""Stabilized combined loss (Dice + positive-weighted BCE + Tversky).

Forward pass: logits are clamped to ``[-logit_clamp, logit_clamp]``, passed
through a sigmoid and the probabilities clamped to ``[eps, 1 - eps]``. Dice
and Tversky indices are computed per sample and averaged over the batch; the
BCE term uses the raw logits in log-sum-exp form with an adaptive positive
weight derived from the batch's positive-pixel ratio.

The backward pass is the closed-form derivative of the same graph. The logit
clamp and probability clamp are graph nodes, so the overlap terms receive no
gradient where a clamp is active; the BCE term never sees the clamp.
"""
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    eps: float = 1e-7
    smooth: float = 1.0
    w_dice: float = 0.5
    w_bce: float = 0.3
    w_tversky: float = 0.2
    alpha_tv: float = 0.7
    beta_tv: float = 0.3
    logit_clamp: float | None = 10.0
    pos_weight_min: float = 1.0
    pos_weight_max: float = 50.0

    def __post_init__(self):
        ws = (self.w_dice, self.w_bce, self.w_tversky)
        if min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-12:
            raise ValueError(f"loss weights must be non-negative and sum to 1, got {ws}")
        if self.eps <= 0 or self.smooth < 0 or self.alpha_tv < 0 or self.beta_tv < 0:
            raise ValueError("eps must be positive; smooth and Tversky trade-offs non-negative")
        if self.logit_clamp is not None and self.logit_clamp <= 0:
            raise ValueError("logit_clamp must be positive or None")
        if not 0 < self.pos_weight_min <= self.pos_weight_max:
            raise ValueError("need 0 < pos_weight_min <= pos_weight_max")


@dataclass
class LossBreakdown:
    total: float
    dice_loss: float
    bce_loss: float
    tversky_loss: float
    pos_weight: float
    grad: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("total", "dice_loss", "bce_loss", "tversky_loss", "pos_weight")}


def _stack(batch, name):
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        arr = np.stack([np.asarray(b) for b in batch]) if len(batch) else np.empty((0, 0, 0))
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a batch of HxW rasters, got shape {arr.shape}")
    return arr


def adaptive_pos_weight(batch_targets, cfg=LossConfig()):
    t = _stack(batch_targets, "targets")
    if t.shape[0] == 0:
        raise ValueError("empty target batch")
    ratio = max(float(t.sum(dtype=np.float64)) / t.size, cfg.eps)
    return min(max((1.0 - ratio) / ratio, cfg.pos_weight_min), cfg.pos_weight_max)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _prepare(logits, targets):
    x = _stack(logits, "logits").astype(np.float64)
    t = _stack(targets, "targets").astype(np.float64)
    if x.shape != t.shape:
        raise ValueError(f"logits shape {x.shape} does not match targets shape {t.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logit input")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")
    return x, t


def _evaluate(logits, targets, cfg, with_grad):
    x, t = _prepare(logits, targets)
    b = x.shape[0]
    n = x.size
    sm = cfg.smooth

    if cfg.logit_clamp is not None:
        c = cfg.logit_clamp
        xc = np.clip(x, -c, c)
        pass_logit = (x >= -c) & (x <= c)
    else:
        xc = x
        pass_logit = None
    s = _sigmoid(xc)
    p = np.clip(s, cfg.eps, 1.0 - cfg.eps)

    axes = (1, 2)
    tp = (p * t).sum(axis=axes)
    fp = (p * (1.0 - t)).sum(axis=axes)
    fn = ((1.0 - p) * t).sum(axis=axes)
    u = p.sum(axis=axes) + t.sum(axis=axes)
    dice = (2 * tp + sm) / (u + sm)
    tv_den = tp + cfg.alpha_tv * fp + cfg.beta_tv * fn + sm
    tversky = (tp + sm) / tv_den
    dice_loss = 1.0 - dice.mean()
    tversky_loss = 1.0 - tversky.mean()

    pw = adaptive_pos_weight(t, cfg)
    # -[pw*t*log(sig(x)) + (1-t)*log(1-sig(x))] = pw*t*softplus(-x) + (1-t)*softplus(x)
    bce_loss = float((pw * t * _softplus(-x) + (1.0 - t) * _softplus(x)).sum() / n)

    total = cfg.w_dice * dice_loss + cfg.w_bce * bce_loss + cfg.w_tversky * tversky_loss
    out = LossBreakdown(total=float(total), dice_loss=float(dice_loss), bce_loss=bce_loss,
                        tversky_loss=float(tversky_loss), pos_weight=float(pw))
    if not all(math.isfinite(v) for v in out.as_dict().values()):
        raise FloatingPointError(f"non-finite loss value {out.as_dict()}")
    if not with_grad:
        return out

    col = (slice(None), None, None)
    # d dice_i / d p
    g_dice = (2 * t * (u + sm)[col] - (2 * tp + sm)[col]) / ((u + sm) ** 2)[col]
    # d tversky_i / d p; dTP = t, dFP = 1 - t, dFN = -t
    d_den = t + cfg.alpha_tv * (1.0 - t) - cfg.beta_tv * t
    g_tv = (t * tv_den[col] - (tp + sm)[col] * d_den) / (tv_den ** 2)[col]
    g_p = -(cfg.w_dice * g_dice + cfg.w_tversky * g_tv) / b
    # probability clamp then sigmoid then logit clamp
    g_s = np.where((s >= cfg.eps) & (s <= 1.0 - cfg.eps), g_p, 0.0)
    g_x = g_s * s * (1.0 - s)
    if pass_logit is not None:
        g_x = np.where(pass_logit, g_x, 0.0)
    sx = _sigmoid(x)
    g_x = g_x + cfg.w_bce * (pw * t * (sx - 1.0) + (1.0 - t) * sx) / n
    if not np.all(np.isfinite(g_x)):
        raise FloatingPointError("non-finite loss gradient")
    out.grad = g_x
    return out


def loss_forward(logits, targets, cfg=LossConfig()):
    """Loss value and components for a ``(B, H, W)`` logit batch (no gradient)."""
    return _evaluate(logits, targets, cfg, with_grad=False)


def loss_backward(logits, targets, cfg=LossConfig()):
    """As :func:`loss_forward` plus ``grad``, dL/dlogit with the batch's shape (float64)."""
    return _evaluate(logits, targets, cfg, with_grad=True)
