"""Command-line entry point: ``iiao {synth,gen-labels,train,eval,predict,verify}``.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage/config error.
``IIAO_NUM_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .config import load_config
from .densitymap import load_annotations, render_adaptive, render_fixed, to_target_grid
from .evaluate import evaluate, export, predict_count
from .model import ConfigError, load_checkpoint
from .synthdata import SceneSpec, generate_split, load_split, read_image
from .train import TrainingDiverged, train_loop

log = logging.getLogger("iiao")


def cmd_synth(args) -> int:
    template = SceneSpec(width=args.width, height=args.height, background=args.background,
                         clustered=args.clustered, head_radius_range=(args.radius_min, args.radius_max))
    out = generate_split(args.out, args.train, args.test, template, seed=args.seed,
                         count_range=(args.min_count, args.max_count), fmt=args.format)
    print(f"wrote {args.train + args.test} scenes to {out}")
    return 0


def cmd_gen_labels(args) -> int:
    data = Path(args.data)
    out = Path(args.out) if args.out else data / "labels"
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in data.glob("*.json") if p.name != "manifest.json" and not p.name.endswith(".dims.json"))
    files += sorted(data.glob("*.csv"))
    for path in files:
        ann = load_annotations(path)
        if args.mode == "fixed":
            dm = render_fixed(ann, args.sigma)
        else:
            dm = render_adaptive(ann, args.k, args.beta, args.sigma_min, args.sigma_max)
        if args.factor > 1:
            dm = to_target_grid(dm, args.factor)
        dest = out / f"{ann.image_id}.{args.format}"
        export(dm, dest, args.format)
        print(f"{ann.image_id}\tpoints={ann.count}\tsum={dm.count:.6f}")
    return 0


def _run_config(args):
    overrides = list(args.set or [])
    for flag, key in (("epochs", "train.epochs"), ("seed", "train.seed")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={v}")
    for flag, key in (("data", "paths.data"), ("out", "paths.out")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f'{key}="{v}"')
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data_dir = cfg.paths.get("data")
    if not data_dir:
        raise ConfigError(["paths.data is required (config or --data)"])
    out = Path(cfg.paths.get("out", "runs/default"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "effective_config.json")
    dataset = load_split(data_dir)
    if not dataset:
        raise ConfigError([f"no annotated images found in {data_dir}"])
    res = train_loop(cfg.model, cfg.train, cfg.loss, dataset, out_dir=out)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} epochs; best train MAE {res.best_mae:.4f} at epoch {res.best_epoch}; "
          f"last loss {last.get('loss_total', float('nan')):.6g}")
    print(f"checkpoints and metrics.csv in {out}")
    return 0


def _resolve_checkpoint(value: str, run_dir: str | None) -> Path:
    if value in ("best", "last"):
        return Path(run_dir or "runs/default") / f"{value}.ckpt.json"
    return Path(value)


def cmd_eval(args) -> int:
    params, mcfg, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint, args.run_dir))
    dataset = load_split(args.data)
    if not dataset:
        raise ConfigError([f"no annotated images found in {args.data}"])
    bounds = [float(b) for b in args.bounds.split(",")] if args.bounds else [50, 500]
    report = evaluate(dataset, params, mcfg, bounds=bounds, rescale_large=args.rescale_large)
    out = Path(args.out) if args.out else Path(args.run_dir or ".") / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    export(report, out, "json")
    if args.scatter:
        export(report, args.scatter, "scatter_csv")
    print(f"MAE {report.mae:.4f}  MSE {report.mse:.4f}  (n={len(report.per_image)})")
    for level, m in (report.level_breakdown or {}).items():
        print(f"  {level:>12}  n={m['n']:<4d} MAE {m['mae']:.4f}  MSE {m['mse']:.4f}")
    print(f"report written to {out}")
    return 0


def cmd_predict(args) -> int:
    params, mcfg, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint, args.run_dir))
    img = read_image(args.image)
    count, dm = predict_count(img, params, mcfg, rescale_large=args.rescale_large)
    if args.out:
        export(dm, args.out, args.format)
    print(f"count {count:.6f}")
    return 0


def cmd_verify(args) -> int:
    checks = verify_mod.run_suite(args.suite)
    for c in checks:
        print(c.line())
        if not c.passed:
            print(f"first failure: {c.name}", file=sys.stderr)
            return 1
    print(f"all {len(checks)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iiao", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic train/test split")
    s.add_argument("--train", type=int, required=True)
    s.add_argument("--test", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--min-count", type=int, default=10)
    s.add_argument("--max-count", type=int, default=300)
    s.add_argument("--radius-min", type=float, default=2.0)
    s.add_argument("--radius-max", type=float, default=4.0)
    s.add_argument("--background", choices=("flat", "gradient", "noise"), default="gradient")
    s.add_argument("--clustered", action="store_true")
    s.add_argument("--format", choices=("ppm", "png"), default="ppm")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gen-labels", help="render density maps from annotation files")
    g.add_argument("--data", required=True, help="directory of annotation .json/.csv files")
    g.add_argument("--out")
    g.add_argument("--mode", choices=("fixed", "adaptive"), default="fixed")
    g.add_argument("--sigma", type=float, default=4.0)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--beta", type=float, default=0.3)
    g.add_argument("--sigma-min", type=float, default=1.0)
    g.add_argument("--sigma-max", type=float, default=15.0)
    g.add_argument("--factor", type=int, default=1, help="sum-pool factor (8 gives training targets)")
    g.add_argument("--format", choices=("csv", "pgm"), default="csv")
    g.set_defaults(func=cmd_gen_labels)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a directory of scenes")
    e.add_argument("--checkpoint", required=True, help="path, or 'best'/'last' inside --run-dir")
    e.add_argument("--run-dir")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--scatter")
    e.add_argument("--bounds", help="comma-separated count thresholds, default 50,500")
    e.add_argument("--rescale-large", action="store_true")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="count one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--run-dir")
    pr.add_argument("--image", required=True)
    pr.add_argument("--out")
    pr.add_argument("--format", choices=("csv", "pgm"), default="csv")
    pr.add_argument("--rescale-large", action="store_true")
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="run gradient and oracle self-checks")
    v.add_argument("--suite", choices=("grads", "rcloss", "oracles", "all"), default="all")
    v.set_defaults(func=cmd_verify)
    return p


def _thread_limit():
    n = os.environ.get("IIAO_NUM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
