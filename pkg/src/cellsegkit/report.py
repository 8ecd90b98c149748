"""Figure data for a finished run: curve CSVs and qualitative overlay PNGs."""
import csv
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .edges import build_bank
from .imageio import write_rgb_png, write_u8_png
from .metrics import MetricReport
from .synth import load_split
from .trainer import load_model, load_run_config, make_inputs, predict_logits

CURVE_FIELDS = ("epoch", "train_loss", "val_dice", "ema_dice", "val_iou", "val_pooled_dice", "lr")
# error-map gray levels
TN, FN, FP, TP = 0, 96, 160, 255
BOUNDARY_RGB = np.array([0.0, 1.0, 0.0])


def error_map(pred, target):
    pred, target = np.asarray(pred).astype(bool), np.asarray(target).astype(bool)
    out = np.full(pred.shape, TN, dtype=np.uint8)
    out[~pred & target] = FN
    out[pred & ~target] = FP
    out[pred & target] = TP
    return out


def boundary(mask):
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def overlay(image, pred):
    out = np.array(image[..., :3], dtype=np.float64, copy=True)
    out[boundary(pred)] = BOUNDARY_RGB
    return out


def _read_rows(path):
    if not path.exists():
        raise FileNotFoundError(f"missing run artifact {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(run_dir, n=4, split="val", data_dir=None):
    """Write ``curves.csv`` plus overlay and error-map PNGs for the ``n`` best
    and ``n`` worst images of ``split``. Returns the written paths."""
    run = Path(run_dir)
    rows = _read_rows(run / "epochs.csv")
    ckpt = run / "best.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing run artifact {ckpt}")
    out_dir = run / "report"
    fig_dir = out_dir / "overlays"
    fig_dir.mkdir(parents=True, exist_ok=True)

    curves = out_dir / "curves.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r[k] for k in CURVE_FIELDS])

    cfg, stored_dir = load_run_config(ckpt)
    model = load_model(ckpt, cfg)
    ids, images, masks = load_split(data_dir or stored_dir, split)
    bank = build_bank() if cfg.gabor_on else None
    logits = predict_logits(model, make_inputs(images, bank, np.dtype(cfg.model.dtype)), cfg.eval_batch)
    preds = (logits >= 0).astype(np.uint8)
    dice = np.array([MetricReport.from_masks(p, m).dice for p, m in zip(preds, masks)])

    # rank only images where something is present or predicted; empty/empty
    # pairs are trivially perfect and say nothing about boundaries
    informative = [i for i in range(len(ids)) if masks[i].any() or preds[i].any()]
    pool = informative if len(informative) >= 2 * n else list(range(len(ids)))
    order = sorted(pool, key=lambda i: (dice[i], ids[i]))
    picks = [("worst", i) for i in order[:n]] + [("best", i) for i in order[::-1][:n]]

    written = {"curves": curves, "overlays": []}
    with open(out_dir / "selected.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("group", "rank", "id", "dice"))
        for rank, (group, i) in enumerate(picks):
            stem = f"{group}_{rank % n if n else 0:02d}_{ids[i]}"
            p_over, p_err = fig_dir / f"{stem}_overlay.png", fig_dir / f"{stem}_error.png"
            write_rgb_png(p_over, overlay(images[i], preds[i]))
            write_u8_png(p_err, error_map(preds[i], masks[i]))
            written["overlays"].append((p_over, p_err))
            w.writerow((group, rank % n if n else 0, ids[i], repr(float(dice[i]))))

    written["dice_summary"] = out_dir / "dice_summary.json"
    written["dice_summary"].write_text(json.dumps(dice_summary(dice, split), indent=1, sort_keys=True) + "\n")
    return written


def dice_summary(dice, split):
    # the std here is the spread over images of one run, not over runs
    return {"split": split, "n_images": int(len(dice)), "dice_mean": float(np.mean(dice)),
            "dice_std_over_images": float(np.std(dice, ddof=1)) if len(dice) > 1 else 0.0}


def across_runs(summaries):
    """Combine per-run dice summaries. Both spreads are reported under
    explicit labels because a bare "mean +/- std" is ambiguous."""
    means = np.array([s["dice_mean"] for s in summaries])
    return {"n_runs": int(len(means)), "dice_mean": float(means.mean()),
            "dice_std_over_runs": float(means.std(ddof=1)) if len(means) > 1 else None,
            "dice_std_over_images_mean": float(np.mean([s["dice_std_over_images"] for s in summaries]))}
