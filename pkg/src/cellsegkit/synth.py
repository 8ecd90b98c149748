"""Seeded synthetic cell-image corpus.

Each sample is a pure function of ``(seed, split, index)``. A sample either
has cells (probability ``p_with_cells``) or is background only. Cell images
get a log-uniform target positive-pixel ratio and a cell count; cells are
elliptical with a Gaussian brightness profile whose half-maximum contour is
the mask boundary, laid out scattered, as a dense cluster or on a ring.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .imageio import read_mask_png, read_rgb_png, write_mask_png, write_rgb_png
from .sampling import components

SPLITS = ("train", "val", "test")
LAYOUTS = ("scattered", "cluster", "ring")
MANIFEST_FIELDS = ("split", "id", "has_cells", "pos_ratio", "component_count")
MIN_CELL_PX = 4


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 599
    n_val: int = 130
    n_test: int = 100
    p_with_cells: float = 0.40
    pos_ratio_range: tuple = (0.001, 0.20)
    cell_count_range: tuple = (1, 25)
    image_side: int = 64
    seed: int = 42
    tolerance: float = 0.30
    max_attempts: int = 100

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if not 0.0 <= self.p_with_cells <= 1.0:
            raise ValueError("p_with_cells must be in [0, 1]")
        lo, hi = self.pos_ratio_range
        if not 0 < lo < hi <= 1:
            raise ValueError("pos_ratio_range must satisfy 0 < lo < hi <= 1")
        kl, kh = self.cell_count_range
        if not 1 <= kl <= kh:
            raise ValueError("cell_count_range must satisfy 1 <= lo <= hi")
        if self.image_side < 8:
            raise ValueError("image_side must be >= 8")

    def size(self, split):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class SampleInfo:
    has_cells: bool
    target_ratio: float = 0.0
    drawn_count: int = 0
    layout: str = ""
    attempts: int = 0
    widened: bool = False
    pos_ratio: float = 0.0
    component_count: int = 0
    notes: list = field(default_factory=list)


def sample_id(split, index):
    return f"{split}_{index:04d}"


def _background(g, side):
    base = g.uniform(0.04, 0.16) * np.array([1.0, 0.85, 1.1]) * g.uniform(0.85, 1.15, 3)
    yy, xx = np.mgrid[0:side, 0:side] / side
    shade = 1.0 + g.uniform(-0.25, 0.25) * (yy - 0.5) + g.uniform(-0.25, 0.25) * (xx - 0.5)
    return base[None, None, :] * shade[..., None]


def _centers(g, layout, k, side, radius):
    margin = radius
    if layout == "scattered":
        return g.uniform(margin, side - margin, (k, 2))
    if layout == "cluster":
        spread = max(1.5 * radius * math.sqrt(k), radius)
        c = g.uniform(side * 0.3, side * 0.7, 2)
        return np.clip(c + g.normal(0.0, spread / 2.0, (k, 2)), margin, side - margin)
    # ring
    c = g.uniform(side * 0.4, side * 0.6, 2)
    ring_r = g.uniform(0.2, 0.35) * side
    ang = g.uniform(0, 2 * math.pi) + 2 * math.pi * np.arange(k) / k + g.normal(0.0, 0.1, k)
    pts = c + ring_r * np.stack([np.sin(ang), np.cos(ang)], axis=1)
    return np.clip(pts, margin, side - margin)


def _rasterize(cells, side, scale):
    """Normalized elliptical distance field (min over cells) for the given size scale."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dist = np.full((side, side), np.inf)
    for cy, cx, a, b, th in cells:
        ct, st = math.cos(th), math.sin(th)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        np.minimum(dist, np.sqrt((u / (a * scale)) ** 2 + (v / (b * scale)) ** 2), out=dist)
    return dist


def _layout_cells(g, layout, k, side, target_px):
    share = g.lognormal(0.0, 0.5, k)
    areas = target_px * share / share.sum()
    aspect = g.uniform(0.55, 1.0, k)
    b = np.sqrt(areas / (math.pi * aspect))
    a = b * aspect
    theta = g.uniform(0, math.pi, k)
    centers = _centers(g, layout, k, side, float(np.sqrt(areas.mean() / math.pi)))
    return [(centers[i, 0], centers[i, 1], a[i], b[i], theta[i]) for i in range(k)]


def _fit_scale(cells, side, target_px, lo_px, hi_px):
    # a few secant-free multiplicative refinements of the radius scale
    scale = 1.0
    for _ in range(6):
        count = int((_rasterize(cells, side, scale) <= 1.0).sum())
        if lo_px <= count <= hi_px:
            return scale, count
        scale *= math.sqrt(target_px / max(count, 0.5))
    count = int((_rasterize(cells, side, scale) <= 1.0).sum())
    return scale, count


def generate_sample(spec, split, index):
    """Return ``(image (S, S, 3) float64 in [0, 1], mask (S, S) uint8, SampleInfo)``."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= index < spec.size(split):
        raise IndexError(f"index {index} outside split {split!r} of size {spec.size(split)}")
    g = rngmod.stream(spec.seed, "corpus", split, index)
    side = spec.image_side
    n_px = side * side
    has_cells = bool(g.random() < spec.p_with_cells)
    image = _background(g, side)
    mask = np.zeros((side, side), dtype=np.uint8)
    info = SampleInfo(has_cells=has_cells)

    if has_cells:
        lo_r, hi_r = spec.pos_ratio_range
        target = math.exp(g.uniform(math.log(lo_r), math.log(hi_r)))
        k_drawn = int(g.integers(spec.cell_count_range[0], spec.cell_count_range[1] + 1))
        target_px = target * n_px
        k = max(1, min(k_drawn, int(target_px // MIN_CELL_PX)))
        hard_lo, hard_hi = math.ceil(lo_r * n_px), math.floor(hi_r * n_px)
        info.target_ratio, info.drawn_count = target, k_drawn
        tol = spec.tolerance
        attempts = 0
        while True:
            attempts += 1
            if attempts > spec.max_attempts and (attempts - 1) % spec.max_attempts == 0:
                tol *= 1.5
                info.widened = True
                info.notes.append(f"tolerance widened to {tol:.3f} after {attempts - 1} attempts")
            layout = LAYOUTS[int(g.integers(0, len(LAYOUTS)))]
            cells = _layout_cells(g, layout, k, side, target_px)
            lo_px = max(hard_lo, math.ceil(target_px * (1 - tol)))
            hi_px = min(hard_hi, math.floor(target_px * (1 + tol)))
            scale, count = _fit_scale(cells, side, target_px, lo_px, hi_px)
            if lo_px <= count <= hi_px:
                break
        dist = _rasterize(cells, side, scale)
        mask = (dist <= 1.0).astype(np.uint8)
        color = np.array([0.62, 0.42, 0.70]) * g.uniform(0.8, 1.2, 3)
        amp = g.uniform(0.45, 0.75)
        # half maximum at the boundary (dist == 1)
        profile = np.exp(-math.log(2.0) * dist ** 2)
        image = image + amp * profile[..., None] * color[None, None, :]
        info.layout, info.attempts = layout, attempts

    image = image + g.normal(0.0, g.uniform(0.02, 0.05), image.shape)
    image = np.clip(image, 0.0, 1.0)
    info.pos_ratio = float(mask.sum(dtype=np.int64)) / n_px
    info.component_count = len(components(mask))
    return image, mask, info


def generate_corpus(spec, out_dir):
    """Write ``{split}/images/{id}.png``, ``{split}/masks/{id}.png`` and
    ``manifest.csv``; returns the manifest rows."""
    out = Path(out_dir)
    rows = []
    for split in SPLITS:
        img_dir, mask_dir = out / split / "images", out / split / "masks"
        try:
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create corpus directory under {out}: {e}") from e
        for i in range(spec.size(split)):
            image, mask, info = generate_sample(spec, split, i)
            sid = sample_id(split, i)
            for path, writer, arr in ((img_dir / f"{sid}.png", write_rgb_png, image),
                                      (mask_dir / f"{sid}.png", write_mask_png, mask)):
                try:
                    writer(path, arr)
                except OSError as e:
                    raise OSError(f"failed writing {path}: {e}") from e
            rows.append({"split": split, "id": sid, "has_cells": int(info.has_cells),
                         "pos_ratio": repr(info.pos_ratio), "component_count": info.component_count})
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv in {data_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != MANIFEST_FIELDS:
        raise ValueError(f"{path}: unexpected manifest header {list(rows[0].keys())}")
    return rows


def load_split(data_dir, split):
    """Images ``(N, H, W, 3)`` float64, masks ``(N, H, W)`` uint8 and ids for one split."""
    data_dir = Path(data_dir)
    ids = [r["id"] for r in read_manifest(data_dir) if r["split"] == split]
    if not ids:
        raise ValueError(f"split {split!r} is empty or missing in {data_dir}")
    images = np.stack([read_rgb_png(data_dir / split / "images" / f"{i}.png") for i in ids])
    masks = np.stack([read_mask_png(data_dir / split / "masks" / f"{i}.png") for i in ids])
    return ids, images, masks
