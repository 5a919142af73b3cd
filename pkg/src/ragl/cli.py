"""Command-line entry point: datagen, train, eval, bench, inspect."""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import config as cfgmod
from .bench import bench_scaling, inspect_weights, write_matrix
from .data import (
    SynthSpec,
    geo_adjacency,
    normalize,
    read_series,
    save_series,
    save_text_series,
    split_and_window,
    synth_generate,
)
from .model import load_checkpoint, save_checkpoint
from .trainer import evaluate, stats_from_metadata, train, write_history

log = logging.getLogger("ragl")

CHECKPOINT_NAME = "checkpoint.ckpt"
HISTORY_NAME = "history.tsv"


class CliError(Exception):
    pass


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _require_file(path):
    if not os.path.isfile(path):
        raise CliError(f"no such file: {path}")
    return path


def build_parser():
    parser = argparse.ArgumentParser(prog="ragl", description=__doc__)
    parser.add_argument("--print-config", action="store_true",
                        help="print every config default as key = value text and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("datagen", help="write a seeded synthetic series")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--interval", type=int, default=900)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=SynthSpec.noise_std)
    p.add_argument("--coupling", type=float, default=SynthSpec.coupling)
    p.add_argument("--text", action="store_true", help="write the text fixture format")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a series file")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("eval", help="report test metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", type=_int_list, default=[3, 6, 12])
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--mask-floor", type=float, default=1e-3)

    p = sub.add_parser("bench", help="scaling benchmark of the graph operator")
    p.add_argument("--n", type=_int_list, required=True)
    p.add_argument("--dnode", type=int, default=32)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--explicit-max", type=int)

    p = sub.add_parser("inspect", help="export summed diffusion weights per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    return parser


def cmd_datagen(args):
    series = synth_generate(n_nodes=args.n, steps=args.steps, interval_seconds=args.interval,
                            seed=args.seed, noise_std=args.noise, coupling=args.coupling)
    if args.text:
        tmp = args.out + ".partial"
        try:
            save_text_series(series, tmp)
            os.replace(tmp, args.out)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
    else:
        save_series(series, args.out)
    print(f"wrote {series.steps} steps x {series.n_nodes} nodes to {args.out}")
    return 0


def _prepare(series, data_settings, model_cfg):
    splits = split_and_window(series, data_settings.split, model_cfg.horizon_in, model_cfg.horizon_out)
    splits, stats = normalize(splits)
    geo = None
    if model_cfg.adjacency == "geo":
        if series.distances is None:
            raise CliError("adjacency = geo needs a series file with a distance block")
        geo = geo_adjacency(series.distances, data_settings.geo_sigma, data_settings.geo_eps)
    return splits, stats, geo


def cmd_train(args):
    series = read_series(_require_file(args.data))
    run = cfgmod.load_config(_require_file(args.config)) if args.config else cfgmod.RunConfig()
    cfgmod.apply_overrides(run, args.set)
    for key, value in (("epochs", args.epochs), ("batch_size", args.batch_size), ("seed", args.seed)):
        if value is not None:
            run.train[key] = value
    model_cfg, sched, data_settings = cfgmod.resolve(
        run, n_nodes=series.n_nodes, channels=series.channels,
        interval_seconds=series.interval_seconds)
    splits, stats, geo = _prepare(series, data_settings, model_cfg)

    def report(rec):
        log.info("epoch %3d  lr %.2e  train %.4f  val MAE %.4f  (%.1fs)",
                 rec.epoch, rec.lr, rec.train_loss, rec.val_mae, rec.wall_seconds)

    result = train(model_cfg, sched, splits, stats, geo_adjacency=geo, callback=report)

    os.makedirs(args.out, exist_ok=True)
    staging = tempfile.mkdtemp(dir=args.out, prefix=".staging-")
    try:
        meta = result.metadata(split=list(data_settings.split), geo_sigma=data_settings.geo_sigma,
                               geo_eps=data_settings.geo_eps)
        save_checkpoint(os.path.join(staging, CHECKPOINT_NAME), model_cfg, result.params, meta)
        write_history(result.history, os.path.join(staging, HISTORY_NAME))
        for name in (CHECKPOINT_NAME, HISTORY_NAME):
            os.replace(os.path.join(staging, name), os.path.join(args.out, name))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"best val MAE {result.best_val_mae:.4f} at epoch {result.best_epoch}; "
          f"checkpoint in {os.path.join(args.out, CHECKPOINT_NAME)}")
    return 0


def cmd_eval(args):
    cfg, params, meta = load_checkpoint(_require_file(args.checkpoint))
    series = read_series(_require_file(args.data))
    if (series.n_nodes, series.channels) != (cfg.n_nodes, cfg.channels):
        raise CliError(f"data has {series.n_nodes} nodes x {series.channels} channels, "
                       f"checkpoint expects {cfg.n_nodes} x {cfg.channels}")
    ratios = tuple(meta.get("split", (0.6, 0.2, 0.2)))
    splits = split_and_window(series, ratios, cfg.horizon_in, cfg.horizon_out)
    stats = stats_from_metadata(meta)
    windows = getattr(splits, args.split).with_source(stats.apply(series.values))
    geo = None
    if cfg.adjacency == "geo":
        geo = geo_adjacency(series.distances, meta.get("geo_sigma"), meta.get("geo_eps", 0.1))
    report = evaluate(cfg, params, stats, windows, horizons=tuple(args.horizons),
                      mask_floor=args.mask_floor, geo_adjacency=geo)
    sys.stdout.write(report.format())
    return 0


def cmd_bench(args):
    result = bench_scaling(args.n, d_node=args.dnode, d=args.d, reps=args.reps,
                           threads=args.threads, explicit_n_max=args.explicit_max)
    print(result.table())
    return 0


def cmd_inspect(args):
    _, params, _ = load_checkpoint(_require_file(args.checkpoint))
    summaries = inspect_weights(params)
    staging = args.out_dir.rstrip("/") + ".partial"
    os.makedirs(staging, exist_ok=True)
    try:
        for s in summaries:
            write_matrix(os.path.join(staging, f"layer{s.layer}_wsum.txt"), s.summed)
        with open(os.path.join(staging, "identity_distance.tsv"), "w") as fh:
            fh.write("layer\tidentity_distance\n")
            for s in summaries:
                fh.write(f"{s.layer}\t{s.identity_distance!r}\n")
        os.makedirs(args.out_dir, exist_ok=True)
        for name in os.listdir(staging):
            os.replace(os.path.join(staging, name), os.path.join(args.out_dir, name))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    for s in summaries:
        print(f"layer {s.layer}: ||W_sum - I||_F / ||I||_F = {s.identity_distance:.6f}")
    return 0


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    if args.print_config:
        sys.stdout.write(cfgmod.default_config_text())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (CliError, OSError, ValueError) as exc:
        print(f"ragl {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
