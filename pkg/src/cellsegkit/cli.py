"""Command-line entry point ``csk``.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
``CSK_THREADS`` caps BLAS/FFT worker threads (0 or unset = library default).
"""
import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(value):
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def build_parser():
    p = Parser(prog="csk", description="Cell segmentation toolkit: data, enhancement, training and reports.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    g = sub.add_parser("generate", help="write the seeded synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--side", type=int, default=64, help="image side in pixels (default 64)")
    g.add_argument("--seed", type=int, default=42, help="corpus seed (default 42)")
    g.add_argument("--n-train", type=int, default=599, help="training images (default 599)")
    g.add_argument("--n-val", type=int, default=130, help="validation images (default 130)")
    g.add_argument("--n-test", type=int, default=100, help="test images (default 100)")
    g.add_argument("--p-with-cells", type=float, default=0.40, help="probability an image has cells (default 0.4)")

    e = sub.add_parser("enhance", help="Gabor edge channel for one RGB PNG")
    e.add_argument("--in", dest="input", required=True, help="input RGB PNG")
    e.add_argument("--out", required=True, help="output grayscale PNG for the edge channel")
    e.add_argument("--side", type=int, default=31, help="kernel side, odd (default 31)")
    e.add_argument("--raster", help="also write the 4-channel image as a CSK1 raster here")

    w = sub.add_parser("weights", help="complexity sampling weights for a mask directory")
    w.add_argument("--masks", required=True, help="directory of mask PNGs")
    w.add_argument("--csv", action="store_true", help="emit CSV id,weight,components,min_area,pos_ratio")

    s = sub.add_parser("schedule", help="print the learning-rate schedule")
    s.add_argument("--total", type=int, required=True, help="final step index T (rows 0..T are printed)")
    s.add_argument("--csv", action="store_true", help="emit CSV step,lr")
    s.add_argument("--lr-max", type=float, default=3e-4, help="peak learning rate (default 3e-4)")
    s.add_argument("--lr-min", type=float, default=3e-7, help="final learning rate (default 3e-7)")
    s.add_argument("--warmup-frac", type=float, default=0.10, help="warmup fraction (default 0.1)")

    le = sub.add_parser("loss-eval", help="evaluate the composite loss on CSK1 rasters")
    le.add_argument("--logits", required=True, help="CSK1 raster of logits; channels are batch members")
    le.add_argument("--targets", required=True, help="CSK1 raster of 0/1 targets, same shape")
    le.add_argument("--json", action="store_true", help="print a JSON object")

    t = sub.add_parser("train", help="train a model on a generated corpus")
    t.add_argument("--config", help="JSON file with flat TrainConfig keys")
    t.add_argument("--data", required=True, help="corpus directory (from generate)")
    t.add_argument("--out", required=True, help="run output directory")
    _train_overrides(t)
    t.add_argument("--quiet", action="store_true", help="no per-epoch log lines")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    ev.add_argument("--ckpt", required=True, help="checkpoint file inside a run directory")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"), help="split (default test)")
    ev.add_argument("--tta", action="store_true", help="7-fold dihedral test-time augmentation")
    ev.add_argument("--data", help="corpus directory (default: the one recorded in the run)")
    ev.add_argument("--csv", help="write per-image metrics CSV here")

    a = sub.add_parser("ablate", help="2x2 ablation over gabor_on and sampler_on")
    a.add_argument("--config", help="JSON file with flat TrainConfig keys")
    a.add_argument("--data", required=True, help="corpus directory")
    a.add_argument("--out", required=True, help="output directory for the four runs")
    _train_overrides(a)
    a.add_argument("--quiet", action="store_true", help="no per-epoch log lines")

    r = sub.add_parser("report", help="curve CSVs and overlay PNGs for a run")
    r.add_argument("--run", required=True, nargs="+",
                   help="run directory written by train; several runs also get a std over runs")
    r.add_argument("--n", type=int, default=4, help="best and worst images to render (default 4)")
    r.add_argument("--split", default="val", choices=("train", "val", "test"), help="split (default val)")
    r.add_argument("--data", help="corpus directory (default: the one recorded in the run)")
    return p


def _train_overrides(p):
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--lr-max", type=float, help="override lr_max")
    p.add_argument("--batch-size", type=int, help="override batch_size")
    p.add_argument("--gabor", type=_on_off, help="override gabor_on (on/off)")
    p.add_argument("--sampler", type=_on_off, help="override sampler_on (on/off)")


def _resolve_train_config(args):
    from .trainer import config_from_flat

    flat = {}
    if args.config:
        flat = json.loads(Path(args.config).read_text())
        if not isinstance(flat, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    over = {"epochs": args.epochs, "seed": args.seed, "lr_max": args.lr_max,
            "batch_size": args.batch_size, "gabor_on": args.gabor, "sampler_on": args.sampler}
    flat.update({k: v for k, v in over.items() if v is not None})
    try:
        return config_from_flat(flat)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from err


def _echo(cfg):
    print("# config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def cmd_generate(args):
    from .synth import CorpusSpec, generate_corpus

    spec = CorpusSpec(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                      p_with_cells=args.p_with_cells, image_side=args.side, seed=args.seed)
    _echo(dataclasses.asdict(spec))
    rows = generate_corpus(spec, args.out)
    print(f"wrote {len(rows)} samples to {args.out}")


def cmd_enhance(args):
    from .edges import assemble_4ch, build_bank, edge_map
    from .imageio import read_rgb_png, write_gray_png, write_raster

    _echo(vars(args))
    image = read_rgb_png(args.input)
    edge = edge_map(image, build_bank(args.side))
    write_gray_png(args.out, edge)
    if args.raster:
        write_raster(args.raster, assemble_4ch(image, edge))


def cmd_weights(args):
    from .imageio import read_mask_png
    from .sampling import complexity_weight

    _echo(vars(args))
    paths = sorted(Path(args.masks).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG masks in {args.masks}")
    rows = [complexity_weight(read_mask_png(pth), pth.stem) for pth in paths]
    if args.csv:
        print("id,weight,components,min_area,pos_ratio")
        for r in rows:
            print(f"{r.sample_id},{r.weight!r},{r.component_count},{r.min_component_area},{r.pos_ratio!r}")
    else:
        for r in rows:
            print(f"{r.sample_id:>16s}  weight {r.weight:.2f}  components {r.component_count:3d}  "
                  f"min_area {r.min_component_area:5d}  pos_ratio {r.pos_ratio:.5f}")


def cmd_schedule(args):
    from .optim import OptimConfig, lr_at, warmup_steps

    try:
        cfg = OptimConfig(lr_max=args.lr_max, lr_min=args.lr_min, warmup_frac=args.warmup_frac,
                          total_steps=args.total)
    except ValueError as err:
        raise UsageError(str(err)) from err
    _echo(dataclasses.asdict(cfg))
    if args.csv:
        print("step,lr")
        for t in range(cfg.total_steps + 1):
            print(f"{t},{lr_at(t, cfg)!r}")
    else:
        w = warmup_steps(cfg)
        print(f"steps 0..{cfg.total_steps}, warmup ends at step {w}")
        for t in sorted({0, w, (w + cfg.total_steps) // 2, cfg.total_steps}):
            print(f"  step {t:6d}  lr {lr_at(t, cfg):.6e}")


def cmd_loss_eval(args):
    from .imageio import read_raster
    from .loss import LossConfig, loss_forward

    _echo(vars(args))
    logits = read_raster(args.logits).transpose(2, 0, 1)
    targets = read_raster(args.targets).transpose(2, 0, 1)
    res = loss_forward(logits, targets, LossConfig())
    vals = res.as_dict()
    if args.json:
        print("{" + ", ".join(f'"{k}": {v:.9g}' for k, v in vals.items()) + "}")
    else:
        for k, v in vals.items():
            print(f"{k} {v:.9g}")


def cmd_train(args):
    from .trainer import config_to_flat, train

    cfg = _resolve_train_config(args)
    _echo(config_to_flat(cfg))
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    rep = train(cfg, args.data, args.out, log=log)
    best = rep.best()
    print(f"best epoch {rep.best_epoch}: val_dice {best['val_dice']:.4f} ema {best['ema_dice']:.4f}; "
          f"artifacts in {args.out}")


def cmd_eval(args):
    from .trainer import evaluate

    _echo(vars(args))
    res = evaluate(args.ckpt, args.split, tta=args.tta, data_dir=args.data)
    if args.csv:
        Path(args.csv).write_text(res.to_csv())
    print(json.dumps(res.summary_dict(), indent=1, sort_keys=True))


def cmd_ablate(args):
    from .trainer import ablate, config_to_flat

    cfg = _resolve_train_config(args)
    _echo(config_to_flat(cfg))
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    rows = ablate(cfg, args.data, args.out, log=log)
    for r in rows:
        print(f"{r['run']:>18s}  mean_dice {r['mean_dice']:.4f}  delta {r['delta_vs_full']:+.4f} "
              f"(se {r['delta_se']:.4f}, wilcoxon p {r['wilcoxon_p']:.3g})")


def cmd_report(args):
    from .report import across_runs, report

    _echo(vars(args))
    summaries = []
    for run in args.run:
        out = report(run, n=args.n, split=args.split, data_dir=args.data)
        summaries.append(json.loads(out["dice_summary"].read_text()))
        s = summaries[-1]
        print(f"{run}: dice {s['dice_mean']:.4f} +/- {s['dice_std_over_images']:.4f} (std over images, "
              f"n={s['n_images']}); wrote {out['curves']} and {len(out['overlays'])} overlay pairs")
    if len(summaries) > 1:
        agg = across_runs(summaries)
        print(f"across {agg['n_runs']} runs: dice {agg['dice_mean']:.4f} +/- {agg['dice_std_over_runs']:.4f} "
              f"(std over runs of per-run means)")


COMMANDS = {"generate": cmd_generate, "enhance": cmd_enhance, "weights": cmd_weights,
            "schedule": cmd_schedule, "loss-eval": cmd_loss_eval, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def _thread_limit():
    raw = os.environ.get("CSK_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CSK_THREADS must be a non-negative integer, got {raw!r}")
    if n < 0:
        raise UsageError(f"CSK_THREADS must be a non-negative integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        threads = _thread_limit()
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as ex:  # --help
        return 0 if ex.code in (0, None) else 1

    try:
        if threads > 0:
            from threadpoolctl import threadpool_limits
            import scipy.fft

            with threadpool_limits(limits=threads), scipy.fft.set_workers(threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as err:
        print(f"csk {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
