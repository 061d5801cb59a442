"""Command line interface: datagen, train, eval, ablate, dump-attention, overlay."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from . import ablation as ablation_mod
from . import checkpoint as ckpt_io
from . import data as data_io
from . import trainer, visualize
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     load_config, save_config, validate)
from .data import DatasetError
from .metrics import PRECISION_THRESHOLDS


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="experiment config JSON (defaults to toy scale)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field")
    parser.add_argument("--seed", type=int, default=None, help="override config.seed")


def _resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    elif base is not None:
        config = base
    else:
        config = ExperimentConfig()
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return validate(config)


def cmd_datagen(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out) / args.split
    dataset = data_io.generate_split(config, args.count, args.noise, args.split)
    data_io.write_dataset(dataset, out)
    save_config(config, Path(args.out) / f"config_{args.split}.json")
    print(f"wrote {len(dataset.samples)} samples to {out} (noise={args.noise})")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    result = trainer.train(config, args.data, args.out, val_dir=args.val,
                           resume=args.resume, threads=args.threads,
                           quiet=args.quiet)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if result.final_summary is not None:
        print(result.final_summary.to_json())
    return 0


def _print_summary_table(summary) -> None:
    columns = ["mean_iou"] + [f"Pr@{x}" for x in PRECISION_THRESHOLDS]
    values = [summary.mean_iou] + [summary.precision_at[x] for x in PRECISION_THRESHOLDS]
    width = max(len(c) for c in columns) + 2
    print("".join(c.rjust(width) for c in columns))
    print("".join(f"{v:.4f}".rjust(width) for v in values))


EVAL_OVERRIDABLE = {"selection_strategy", "batch_size", "seed"}


def cmd_eval(args) -> int:
    model, ckpt = visualize.load_model(args.ckpt)
    config = ckpt.config
    if args.overrides or args.seed is not None or args.config:
        requested = _resolve_config(args, base=config)
        changed = {k for k, v in requested.to_dict().items()
                   if v != config.to_dict()[k]}
        if changed - EVAL_OVERRIDABLE:
            raise ConfigError([
                f"{k} cannot differ from the checkpoint at eval time"
                for k in sorted(changed - EVAL_OVERRIDABLE)])
        config = requested
        model.config = config
    torch.set_num_threads(args.threads)
    samples, _ = trainer.load_split(args.data, config, ckpt.vocab)
    summary, rows = trainer.evaluate_model(model, samples, config.batch_size)
    _print_summary_table(summary)
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(summary.to_json() + "\n", encoding="utf-8")
    if args.dump_scores:
        with open(out_dir / "scores.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "iou", "selected", "target", "scores"])
            for row in rows:
                writer.writerow([
                    row.sample_id, repr(row.iou),
                    "" if row.selected is None else row.selected,
                    "" if row.target is None else row.target,
                    "" if row.scores is None else " ".join(repr(s) for s in row.scores),
                ])
        print(f"scores: {out_dir / 'scores.csv'}")
    print(f"summary: {out_dir / 'eval.json'}")
    return 0


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    if args.manifest:
        manifest = ablation_mod.load_manifest(args.manifest)
        if args.out:
            manifest.output_directory = str(args.out)
    else:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        manifest = ablation_mod.default_manifest(str(args.out), seeds=seeds)
    out_root = Path(manifest.output_directory)
    out_root.mkdir(parents=True, exist_ok=True)

    train_dir, val_dir = args.data, args.val
    if train_dir is None:
        train_dir = out_root / "data" / "train"
        val_dir = out_root / "data" / "val"
        if not (Path(train_dir) / "manifest.jsonl").exists():
            print(f"generating {args.train_count}+{args.val_count} samples "
                  f"(noise={args.noise}) under {out_root / 'data'}")
            data_io.write_dataset(
                data_io.generate_split(config, args.train_count, args.noise, "train"),
                train_dir)
            data_io.write_dataset(
                data_io.generate_split(config, args.val_count, args.noise, "val"),
                val_dir)
    elif val_dir is None:
        print("--val is required when --data is given", file=sys.stderr)
        return 1

    ablation_mod.save_manifest(manifest, out_root / "manifest.json")
    results = ablation_mod.run_ablation(manifest, config, train_dir, val_dir,
                                        threads=args.threads, quiet=args.quiet)
    print((out_root / "results.txt").read_text(encoding="utf-8"))
    failed = [r for r in results if r.status == "failed"]
    print(f"results: {out_root / 'results.csv'}")
    return 0 if not failed else 1


def cmd_dump_attention(args) -> int:
    query = None
    if args.query:
        row, _, col = args.query.partition(",")
        query = (int(row), int(col))
    paths = visualize.dump_attention(args.ckpt, args.data, args.sample,
                                     args.out, query=query)
    for path in paths:
        print(path)
    return 0


def cmd_overlay(args) -> int:
    sample_ids = [s for s in args.samples.split(",") if s]
    paths = visualize.render_overlays(args.ckpt, args.data, sample_ids, args.out)
    for path in paths:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triseg",
        description="Trimodal referring image segmentation on synthetic shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset split")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--noise", choices=list(data_io.NOISE_LEVELS), default="light")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True, help="training split directory")
    p.add_argument("--val", type=Path, default=None, help="validation split directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_config_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-scores", action="store_true",
                   help="write per-sample (scores, selected, target) rows to CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _add_config_args(p)
    p.add_argument("--manifest", type=Path, default=None,
                   help="manifest JSON (defaults to the full variant matrix)")
    p.add_argument("--data", type=Path, default=None, help="shared training split")
    p.add_argument("--val", type=Path, default=None, help="shared validation split")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default=None, help="comma-separated (default 0,1,2)")
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--val-count", type=int, default=400)
    p.add_argument("--noise", choices=list(data_io.NOISE_LEVELS), default="light")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="write per-block attention maps")
    _add_config_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sample", required=True, help="sample_id to visualize")
    p.add_argument("--query", default=None, metavar="ROW,COL",
                   help="image-grid query cell (default: ground-truth peak)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("overlay", help="render prediction/selection overlays")
    _add_config_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--samples", required=True, help="comma-separated sample_ids")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ckpt_io.CheckpointError, KeyError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
