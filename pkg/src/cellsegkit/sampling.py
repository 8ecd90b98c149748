"""Complexity-weighted sampling of training images."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import as_mask

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ComplexityConfig:
    small_bonus: float = 0.5
    small_area_ref: float = 100.0  # px at the reference side, scaled by H*W / ref_side**2
    ref_side: int = 512
    count_coef: float = 0.1
    count_cap: int = 10


@dataclass(frozen=True)
class SampleWeight:
    sample_id: str
    weight: float
    has_cells: bool
    component_count: int
    min_component_area: int
    pos_ratio: float


def components(mask):
    """Sizes of the 8-connected components of a binary mask."""
    labels, n = ndimage.label(as_mask(mask), structure=EIGHT_CONNECTED)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(labels.ravel(), minlength=n + 1)[1:]


def complexity_weight(mask, sample_id="", cfg=ComplexityConfig()):
    """1.0 for an empty mask, otherwise ``1 + small_bonus * [smallest cell is
    small] + count_coef * min(count - 1, count_cap)``."""
    mask = as_mask(mask)
    sizes = components(mask)
    pos_ratio = float(mask.sum(dtype=np.int64)) / mask.size
    if len(sizes) == 0:
        return SampleWeight(sample_id, 1.0, False, 0, 0, pos_ratio)
    h, w = mask.shape
    small_thresh = cfg.small_area_ref * (h * w) / cfg.ref_side ** 2
    min_area = int(sizes.min())
    weight = (1.0 + cfg.small_bonus * float(min_area < small_thresh)
              + cfg.count_coef * min(len(sizes) - 1, cfg.count_cap))
    return SampleWeight(sample_id, weight, True, len(sizes), min_area, pos_ratio)


def weighted_draw(weights, n, rng):
    """``n`` i.i.d. draws with replacement, P(i) proportional to weight i.

    ``weights`` holds SampleWeight records or plain positive numbers; returns
    the drawn sample ids (or indices for plain numbers).
    """
    if len(weights) == 0:
        raise ValueError("empty weight list")
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(weights[0], SampleWeight):
        ids = [w.sample_id for w in weights]
        w = np.array([x.weight for x in weights], dtype=np.float64)
    else:
        ids = None
        w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and positive")
    cdf = np.cumsum(w)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    idx = np.minimum(idx, len(w) - 1)
    return idx.tolist() if ids is None else [ids[i] for i in idx]
