"""Training loop, evaluation and ablation runs."""
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import rng as rngmod
from .augment import AugmentConfig, augment, tta_predict
from .edges import build_bank, edge_maps
from .ema import ValidationTrace, ema_update, select_best, trace_to_csv
from .loss import LossConfig, loss_backward
from .metrics import METRIC_FIELDS, MetricReport, summarize
from .model import checkpoint
from .model.net import ModelConfig, NestedUNet, init_params
from .optim import AdamW, OptimConfig, average_gradients, clip_gradients, global_norm, check_finite_grads, lr_at
from .sampling import complexity_weight, weighted_draw
from .synth import load_split

STEP_FIELDS = ("step", "epoch", "lr", "loss", "grad_norm", "clip_factor")
EPOCH_FIELDS = ("epoch", "train_loss", "val_dice", "val_iou", "val_precision", "val_recall",
                "val_pooled_dice", "lr", "ema_dice", "outlier")


@dataclass(frozen=True)
class EMAConfig:
    alpha: float = 0.9
    outlier_k: float = 3.0
    outlier_floor: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    accum_steps: int = 2
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ema: EMAConfig = field(default_factory=EMAConfig)
    sampler_on: bool = True
    gabor_on: bool = True
    clip_on: bool = True
    selection: str = "ema"
    eval_batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.accum_steps < 1 or self.eval_batch < 1:
            raise ValueError("epochs, batch_size, accum_steps and eval_batch must be >= 1")
        if self.selection not in ("ema", "raw"):
            raise ValueError(f"selection must be 'ema' or 'raw', got {self.selection!r}")


SECTIONS = {"optimizer": OptimConfig, "loss": LossConfig, "augment": AugmentConfig,
            "model": ModelConfig, "ema": EMAConfig}
TOP_LEVEL = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in SECTIONS)
# keys owned by the top level even though a section has a field of that name
SHADOWED = {"optimizer": ("accum_steps", "total_steps"), "augment": ("seed",)}


def flat_keys():
    keys = list(TOP_LEVEL)
    for sec, cls in SECTIONS.items():
        keys += [f.name for f in dataclasses.fields(cls) if f.name not in SHADOWED.get(sec, ())]
    return keys


def _coerce(value, default):
    if isinstance(value, str) and isinstance(default, float):
        return float(value)  # allows "inf"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ValueError(f"expected an integer, got {value!r}")
    return value


def config_from_flat(flat, base=None):
    """Build a TrainConfig from flat ``{field: value}`` keys (unknown keys rejected)."""
    base = base or TrainConfig()
    known = set(flat_keys())
    unknown = sorted(set(flat) - known - {"total_steps"})
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    top = {k: _coerce(v, getattr(base, k)) for k, v in flat.items() if k in TOP_LEVEL}
    for sec in SECTIONS:
        sub = getattr(base, sec)
        owned = {f.name for f in dataclasses.fields(sub)} - set(SHADOWED.get(sec, ()))
        upd = {k: _coerce(v, getattr(sub, k)) for k, v in flat.items() if k in owned}
        if sec == "optimizer" and "total_steps" in flat:
            upd["total_steps"] = _coerce(flat["total_steps"], sub.total_steps)
        top[sec] = dataclasses.replace(sub, **upd) if upd else sub
    return dataclasses.replace(base, **top)


def config_to_flat(cfg):
    out = {k: getattr(cfg, k) for k in TOP_LEVEL}
    for sec in SECTIONS:
        sub = getattr(cfg, sec)
        for f in dataclasses.fields(sub):
            if f.name not in SHADOWED.get(sec, ()):
                out[f.name] = getattr(sub, f.name)
    out["total_steps"] = cfg.optimizer.total_steps
    return out


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunReport:
    epochs: list
    steps: list
    best_epoch: int
    wall_time: float
    config: dict
    nan_events: int
    steps_per_epoch: int
    total_steps: int

    def best(self):
        return self.epochs[self.best_epoch - 1]


def make_inputs(images, bank, dtype=np.float32):
    """``(N, H, W, 3)`` images -> ``(N, 4, H, W)`` network input; the edge
    channel is all zeros when ``bank`` is None."""
    images = np.asarray(images, dtype=np.float64)
    if bank is None:
        edges = np.zeros(images.shape[:3])
    else:
        edges = edge_maps(images, bank)
    x = np.concatenate([images, edges[..., None]], axis=3)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype)


def predict_logits(model, x, batch=32):
    """Eval-mode logits ``(N, H, W)`` float64 for NCHW input, in fixed-size chunks."""
    out = [model.forward(x[i:i + batch], "eval")[:, 0] for i in range(0, len(x), batch)]
    return np.concatenate(out).astype(np.float64)


def evaluate_logits(logits, masks):
    reports = [MetricReport.from_masks((lg >= 0).astype(np.uint8), m) for lg, m in zip(logits, masks)]
    return reports, summarize(reports)


def _csv_text(fields, rows):
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(repr(float(r[k])) if isinstance(r[k], float) else str(r[k]) for k in fields))
    return "\n".join(lines) + "\n"


def _finite_abs_max(a):
    a = np.abs(a[np.isfinite(a)])
    return float(a.max()) if a.size else 0.0


def _dump_state(out_dir, where, epoch, step, store, err):
    info = {"where": where, "epoch": epoch, "step": step, "error": str(err), "params": {}}
    for name, p in store.params.items():
        g = store.grads[name]
        info["params"][name] = {
            "finite": bool(np.all(np.isfinite(p))), "grad_finite": bool(np.all(np.isfinite(g))),
            "abs_max": _finite_abs_max(p), "grad_abs_max": _finite_abs_max(g),
        }
    path = Path(out_dir) / "nan_dump.json"
    path.write_text(json.dumps(info, indent=1, default=str))
    return path


def _resolve(cfg, n_train):
    per_step = cfg.batch_size * cfg.accum_steps
    steps_per_epoch = n_train // per_step
    if steps_per_epoch < 1:
        raise ValueError(f"training split of {n_train} images is smaller than one optimizer step ({per_step})")
    n_opt = cfg.epochs * steps_per_epoch
    if n_opt < 3:
        raise ValueError("need at least 3 optimizer steps in total")
    opt = dataclasses.replace(cfg.optimizer, accum_steps=cfg.accum_steps, total_steps=n_opt - 1)
    aug = dataclasses.replace(cfg.augment, seed=cfg.seed)
    return dataclasses.replace(cfg, optimizer=opt, augment=aug), steps_per_epoch


def train(cfg, data_dir, out_dir, log=None):
    """Train on ``data_dir`` (a generated corpus) and write artifacts to ``out_dir``."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids_tr, x_tr, y_tr = load_split(data_dir, "train")
    _, x_val, y_val = load_split(data_dir, "val")
    cfg, steps_per_epoch = _resolve(cfg, len(ids_tr))
    flat = config_to_flat(cfg)
    (out / "config.json").write_text(json.dumps(
        {"config": flat, "data_dir": str(Path(data_dir).resolve())}, indent=1, sort_keys=True))

    bank = build_bank() if cfg.gabor_on else None
    dtype = np.dtype(cfg.model.dtype)
    val_x = make_inputs(x_val, bank, dtype)
    if cfg.sampler_on:
        weights = [complexity_weight(m).weight for m in y_tr]
    else:
        weights = [1.0] * len(ids_tr)

    store = init_params(cfg.model, cfg.seed)
    model = NestedUNet(cfg.model, store=store)
    opt = AdamW(store, cfg.optimizer)
    trace = ValidationTrace(alpha=cfg.ema.alpha, outlier_k=cfg.ema.outlier_k, outlier_floor=cfg.ema.outlier_floor)
    steps, epochs = [], []
    per_step = cfg.batch_size * cfg.accum_steps
    gstep = 0
    best_epoch = None

    for epoch in range(1, cfg.epochs + 1):
        draws = weighted_draw(weights, steps_per_epoch * per_step, rngmod.stream(cfg.seed, "sampler", epoch))
        losses = []
        for s in range(steps_per_epoch):
            micro_losses = []
            where = "forward"
            try:
                for a in range(cfg.accum_steps):
                    k0 = (s * cfg.accum_steps + a) * cfg.batch_size
                    imgs, msks = [], []
                    for j in range(k0, k0 + cfg.batch_size):
                        i = draws[j]
                        im, m = augment(x_tr[i], y_tr[i], cfg.augment, rngmod.stream(cfg.seed, "augment", epoch, j))
                        imgs.append(im)
                        msks.append(m)
                    x = make_inputs(np.stack(imgs), bank, dtype)
                    where = "forward"
                    logits = model.forward(x, "train")
                    if not np.all(np.isfinite(logits)):
                        raise FloatingPointError("non-finite logits")
                    where = "loss"
                    lb = loss_backward(logits[:, 0], np.stack(msks), cfg.loss)
                    where = "backward"
                    model.backward(lb.grad[:, None], need_input_grad=False)
                    micro_losses.append(lb.total)
                where = "optimizer"
                average_gradients(store, cfg.accum_steps)
                check_finite_grads(store)
                gnorm = global_norm(store)
                factor = clip_gradients(store, cfg.optimizer.clip_norm) if cfg.clip_on else 1.0
                lr = lr_at(gstep, cfg.optimizer)
                opt.step(store, lr)
            except (FloatingPointError, ValueError) as err:
                dump = _dump_state(out, where, epoch, gstep, store, err)
                raise TrainingAborted(f"non-finite value at {where} (epoch {epoch}, step {gstep}): {err}; "
                                      f"state dumped to {dump}") from err
            store.zero_grad()
            loss = float(np.mean(micro_losses))
            losses.append(loss)
            steps.append({"step": gstep, "epoch": epoch, "lr": lr, "loss": loss,
                          "grad_norm": gnorm, "clip_factor": factor})
            gstep += 1

        logits = predict_logits(model, val_x, cfg.eval_batch)
        _, summ = evaluate_logits(logits, y_val)
        rec = ema_update(trace, summ["dice_mean"], epoch)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": summ["dice_mean"],
               "val_iou": summ["iou_mean"], "val_precision": summ["precision_mean"],
               "val_recall": summ["recall_mean"], "val_pooled_dice": summ["pooled"].dice,
               "lr": steps[-1]["lr"], "ema_dice": rec.ema_dice, "outlier": int(rec.outlier)}
        epochs.append(row)
        if select_best(trace, cfg.selection) == epoch:
            best_epoch = epoch
            checkpoint.save(out / "best.ckpt", store, opt)
        if log:
            log(f"epoch {epoch:3d} loss {row['train_loss']:.4f} val_dice {row['val_dice']:.4f} "
                f"pooled {row['val_pooled_dice']:.4f} ema {row['ema_dice']:.4f}"
                + (" OUTLIER" if rec.outlier else ""))

    checkpoint.save(out / "last.ckpt", store, opt)
    (out / "steps.csv").write_text(_csv_text(STEP_FIELDS, steps))
    (out / "epochs.csv").write_text(_csv_text(EPOCH_FIELDS, epochs))
    (out / "trace.csv").write_text(trace_to_csv(trace))
    wall = time.perf_counter() - t0
    report = RunReport(epochs, steps, best_epoch, wall, flat, 0, steps_per_epoch, cfg.optimizer.total_steps)
    summary = {"best_epoch": best_epoch, "best": report.best(), "final": epochs[-1], "nan_events": 0,
               "wall_time_s": wall, "steps_per_epoch": steps_per_epoch,
               "total_steps": cfg.optimizer.total_steps, "config": flat}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return report


def load_run_config(ckpt_path):
    path = Path(ckpt_path).parent / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"no config.json next to {ckpt_path}")
    doc = json.loads(path.read_text())
    return config_from_flat(doc["config"]), doc["data_dir"]


@dataclass
class EvalResult:
    ids: list
    reports: list
    summary: dict
    tta_members: tuple = ()
    tta_fallback: bool = False

    def to_csv(self):
        lines = ["id," + ",".join(METRIC_FIELDS)]
        lines += [i + "," + ",".join(r.as_row()) for i, r in zip(self.ids, self.reports)]
        return "\n".join(lines) + "\n"

    def summary_dict(self):
        out = {k: v for k, v in self.summary.items() if k != "pooled"}
        out["pooled"] = dataclasses.asdict(self.summary["pooled"])
        out["n"] = len(self.ids)
        if self.tta_members:
            out["tta_members"] = list(self.tta_members)
            out["tta_fallback"] = self.tta_fallback
        return out


def load_model(ckpt_path, cfg):
    model = NestedUNet(cfg.model, store=init_params(cfg.model, cfg.seed))
    checkpoint.load_into(ckpt_path, model.store)
    return model


def evaluate(ckpt_path, split="test", tta=False, data_dir=None):
    cfg, stored_dir = load_run_config(ckpt_path)
    data_dir = data_dir or stored_dir
    model = load_model(ckpt_path, cfg)
    ids, images, masks = load_split(data_dir, split)
    bank = build_bank() if cfg.gabor_on else None
    x = make_inputs(images, bank, np.dtype(cfg.model.dtype))
    members, fallback = (), False
    if tta:
        def predict(batch_hwc):
            nchw = np.ascontiguousarray(batch_hwc.transpose(0, 3, 1, 2))
            return predict_logits(model, nchw, cfg.eval_batch)
        res = tta_predict(predict, x.transpose(0, 2, 3, 1))
        # probability >= 0.5 is the same decision as logit >= 0
        logits = np.where(res.prob >= 0.5, 1.0, -1.0)
        members, fallback = res.members, res.fallback
    else:
        logits = predict_logits(model, x, cfg.eval_batch)
    reports, summ = evaluate_logits(logits, masks)
    return EvalResult(ids, reports, summ, members, fallback)


def overfit(image, mask, cfg=None, steps=300, seed=0, target=0.99):
    """Fit one image without augmentation; returns the per-step Dice history
    (eval mode after each step), stopping early once ``target`` is reached."""
    cfg = cfg or TrainConfig()
    opt_cfg = dataclasses.replace(cfg.optimizer, total_steps=max(steps - 1, 2))
    bank = build_bank() if cfg.gabor_on else None
    dtype = np.dtype(cfg.model.dtype)
    x = make_inputs(np.asarray(image)[None], bank, dtype)
    y = np.asarray(mask)[None]
    store = init_params(cfg.model, seed)
    model = NestedUNet(cfg.model, store=store)
    opt = AdamW(store, opt_cfg)
    history = []
    for t in range(steps):
        logits = model.forward(x, "train")
        lb = loss_backward(logits[:, 0], y, cfg.loss)
        model.backward(lb.grad[:, None], need_input_grad=False)
        if cfg.clip_on:
            clip_gradients(store, opt_cfg.clip_norm)
        opt.step(store, lr_at(t, opt_cfg))
        store.zero_grad()
        ev = model.forward(x, "eval")[:, 0]
        history.append({"step": t, "loss": lb.total,
                        "dice": MetricReport.from_masks((ev[0] >= 0).astype(np.uint8), y[0]).dice})
        if history[-1]["dice"] >= target:
            break
    return history


def ablate(cfg, data_dir, out_dir, split="test", log=None):
    """Train the 2 x 2 grid of (gabor_on, sampler_on) with a shared seed and
    compare per-image test Dice against the full configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for gabor in (True, False):
        for sampler in (True, False):
            name = f"gabor{int(gabor)}_sampler{int(sampler)}"
            run_cfg = dataclasses.replace(cfg, gabor_on=gabor, sampler_on=sampler)
            if log:
                log(f"ablation run {name}")
            train(run_cfg, data_dir, out / name, log=log)
            ev = evaluate(out / name / "best.ckpt", split)
            results[name] = (gabor, sampler, ev)
    ref = np.array([r.dice for r in results["gabor1_sampler1"][2].reports])
    rows = []
    for name, (gabor, sampler, ev) in results.items():
        d = np.array([r.dice for r in ev.reports])
        diff = d - ref
        if np.any(diff != 0):
            t_p = float(stats.ttest_rel(d, ref).pvalue)
            w_p = float(stats.wilcoxon(d, ref, zero_method="zsplit").pvalue)
        else:
            t_p = w_p = 1.0
        rows.append({"run": name, "gabor_on": int(gabor), "sampler_on": int(sampler),
                     "mean_dice": float(d.mean()), "pooled_dice": ev.summary["pooled"].dice,
                     "delta_vs_full": float(diff.mean()),
                     "delta_se": float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0,
                     "n_better": int((diff > 0).sum()), "n_worse": int((diff < 0).sum()),
                     "ttest_p": t_p, "wilcoxon_p": w_p})
    fields = ("run", "gabor_on", "sampler_on", "mean_dice", "pooled_dice", "delta_vs_full",
              "delta_se", "n_better", "n_worse", "ttest_p", "wilcoxon_p")
    (out / "ablation.csv").write_text(_csv_text(fields, rows))
    return rows
