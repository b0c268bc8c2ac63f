"""Command line entry point: ``tdcnet {synth,train,evaluate,predict,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .dataio import GridGeometry, generate_synthetic_case, synthetic_split_dates, write_grid_stack, write_target_series
from .metrics import render_report_table, write_report_csv
from .pipeline import (
    ConfigError,
    evaluate_split,
    load_run_config,
    run_training,
    write_split_predictions,
)
from .plotting import plot_loss_curves, plot_predictions
from .preprocess import DEFAULT_T, SETS
from .seqmods import MODEL_KINDS
from .training import SYNTH_SENSOR

log = logging.getLogger("tdcnet")



@contextmanager
def output_lock(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".tdcnet.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"another tdcnet command is using {out_dir}") from None
    try:
        yield
    finally:
        lock.release()


def _overrides(args) -> dict:
    o = {
        "model": getattr(args, "model", None),
        "sensor": getattr(args, "sensor", None),
        "ensemble_size": getattr(args, "ensemble_size", None),
        "out_dir": getattr(args, "out", None),
        "epochs": getattr(args, "epochs", None),
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        n = args.ensemble_size
        if n is None:
            n = load_run_config(args.config).ensemble_size if args.config else 10
        o["seeds"] = list(range(seed, seed + n))
    return o


def cmd_synth(args) -> int:
    if args.weeks < 3 * args.T:
        raise ConfigError(
            f"--weeks {args.weeks} is below 3*T = {3 * args.T}: the gapped train/validation/test "
            "split needs at least that many weeks"
        )
    out = Path(args.out)
    with output_lock(out):
        geometry = GridGeometry(7.0, 44.875, 0.125, args.side, args.side)
        raster, target = generate_synthetic_case(args.seed, geometry, args.weeks, T=args.T)
        write_grid_stack(raster, out / "weather")
        target_path = out / f"{SYNTH_SENSOR}.csv"
        write_target_series(target, target_path)
        train_end, test_start = synthetic_split_dates(raster.timestamps, args.T)
        config = {
            "weather_dir": "weather",
            "target_path": target_path.name,
            "out_dir": "runs",
            "sensor": SYNTH_SENSOR,
            "T": args.T,
            "train_end": str(train_end),
            "test_start": str(test_start),
        }
        (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(f"wrote synthetic case to {out} (config: {out / 'config.json'})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    with output_lock(cfg.out_dir):
        ens, ckpt = run_training(cfg, log=print)
        plot_loss_curves(ens.histories, ckpt / "loss_curves.png", title=f"{cfg.sensor} {cfg.model}")
    return 0


def _checkpoint_dir(args, cfg):
    return Path(args.checkpoint_dir) if args.checkpoint_dir else cfg.checkpoint_dir()


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    ckpt = _checkpoint_dir(args, cfg)
    with output_lock(ckpt):
        report = evaluate_split(cfg, ckpt, args.split)
        table = render_report_table([report])
        (ckpt / f"report_{args.split}.txt").write_text(table, encoding="utf-8")
        write_report_csv([report], ckpt / f"report_{args.split}.csv")
    print(table, end="")
    return 0


def cmd_predict(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    ckpt = _checkpoint_dir(args, cfg)
    with output_lock(ckpt):
        path, _ = write_split_predictions(cfg, ckpt, args.split, ckpt)
    print(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    ckpt = _checkpoint_dir(args, cfg)
    with output_lock(ckpt):
        path, (dates, mean, std, observed, ens) = write_split_predictions(cfg, ckpt, args.split, ckpt)
        fig = ckpt / f"predictions_{cfg.sensor}_{cfg.model}_{args.split}.png"
        plot_predictions(dates, observed, mean, std, fig, title=f"{cfg.sensor} {cfg.model} ({args.split})")
        plot_loss_curves(ens.histories, ckpt / "loss_curves.png", title=f"{cfg.sensor} {cfg.model}")
    print(f"wrote {path} and {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdcnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic weather stack, target and config")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--weeks", type=int, default=520)
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--T", type=int, default=DEFAULT_T)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def common(p, split=False):
        p.add_argument("--config", required=True)
        p.add_argument("--model", choices=MODEL_KINDS)
        p.add_argument("--sensor")
        p.add_argument("--seed", type=int, help="first ensemble seed; members use seed, seed+1, ...")
        p.add_argument("--ensemble-size", type=int)
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if split:
            p.add_argument("--checkpoint-dir")
            p.add_argument("--split", choices=SETS, default="test")

    p = sub.add_parser("train", help="train an ensemble and write checkpoints")
    common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)
    for name, func, text in (
        ("evaluate", cmd_evaluate, "compute the metric report on a split"),
        ("predict", cmd_predict, "write ensemble mean/std predictions"),
        ("plot", cmd_plot, "write predictions and figures"),
    ):
        p = sub.add_parser(name, help=text)
        common(p, split=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tdcnet: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, RuntimeError, ValueError, OSError) as exc:
        print(f"tdcnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
