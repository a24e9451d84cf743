"""Command-line harness.

Subcommands: gen-data, train, eval, ablate, gradcheck, dump-attention,
export-embeddings. Training flags mirror the TrainConfig fields; a JSON
config file (--config) uses identical keys, and explicit flags override it.

Exit codes: 0 success, 1 usage or bad configuration, 2 I/O (datasets,
checkpoints, paths), 3 numeric failure (non-finite loss, gradient check).
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import model, reporting, training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import (CheckpointError, ConfigError, DatasetError,
                     NumericError)
from .gradcheck import check_all_primitives
from .pgm import load_dataset, save_dataset
from .synthdata import SynthConfig, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(sub):
    group = sub.add_argument_group("model/training configuration")
    group.add_argument("--config", metavar="JSON",
                       help="JSON file with TrainConfig keys; flags override it")
    for field in dataclasses.fields(TrainConfig):
        flag = "--" + field.name.replace("_", "-")
        if field.type is bool or isinstance(field.default, bool):
            group.add_argument(flag, dest=field.name, default=None,
                               action=argparse.BooleanOptionalAction,
                               help=f"(default {field.default})")
        else:
            group.add_argument(flag, dest=field.name, default=None,
                               type=type(field.default),
                               help=f"(default {field.default!r})")


def _build_config(args):
    merged = {}
    if args.config is not None:
        with open(args.config) as fh:
            text = fh.read()
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        merged.update(loaded)
    for field in dataclasses.fields(TrainConfig):
        value = getattr(args, field.name)
        if value is not None:
            merged[field.name] = value
    return TrainConfig.from_dict(merged)


def _load_checkpoint_pair(path):
    cfg, arrays = load_checkpoint(path)
    return cfg, arrays


def _cmd_gen_data(args):
    scfg = SynthConfig(n_expressions=args.n_expressions, n_poses=args.n_poses,
                       image_size=args.image_size,
                       samples_per_cell=args.samples_per_cell,
                       noise_sigma=args.noise_sigma, seed=args.seed)
    scfg.validate()
    train, test = generate_dataset(scfg)
    save_dataset(train, os.path.join(args.out, "train"))
    save_dataset(test, os.path.join(args.out, "test"))
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = _build_config(args)
    samples = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)

    def log(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss_total']:.4f}  "
              f"acc_e {row['acc_e']:.3f}  acc_p {row['acc_p']:.3f}  "
              f"iou {row['iou_s2']:.3f}", flush=True)

    result = training.train(samples, cfg, log=log if not args.quiet else None)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt, cfg, result.params)
    metrics = os.path.join(args.out, "metrics.csv")
    with open(metrics, "w") as fh:
        fh.write(training.metrics_to_csv(result.metrics))
    print(f"wrote {ckpt} and {metrics}")
    return EXIT_OK


def _fmt_matrix(mat):
    return "\n".join("  " + " ".join(f"{v:5d}" for v in row) for row in mat)


def _cmd_eval(args):
    cfg, arrays = _load_checkpoint_pair(args.checkpoint)
    samples = load_dataset(args.dataset)
    report = reporting.evaluate(arrays, cfg, samples,
                                batch_size=args.batch_size)
    print(f"samples          {len(samples)}")
    print(f"accuracy expr    {report.acc_e:.4f}")
    print(f"accuracy pose    {report.acc_p:.4f}")
    print(f"mean region iou  {report.mean_iou:.4f}")
    print("per-pose expression accuracy:")
    for p, (acc, count) in enumerate(zip(report.per_pose_acc,
                                         report.pose_counts)):
        print(f"  pose {p}: {acc:.4f}  ({count} samples)")
    print("confusion (expression, rows = true):")
    print(_fmt_matrix(report.confusion_e))
    print("confusion (pose, rows = true):")
    print(_fmt_matrix(report.confusion_p))
    return EXIT_OK


def _cmd_ablate(args):
    base = _build_config(args)
    train_s = load_dataset(os.path.join(args.dataset, "train"))
    test_s = load_dataset(os.path.join(args.dataset, "test"))
    os.makedirs(args.out, exist_ok=True)

    def log(name, row):
        print(f"{name:24s} acc_e {row['acc_e']:.3f}  acc_p {row['acc_p']:.3f}  "
              f"iou {row['mean_iou']:.3f}", flush=True)

    results = reporting.ablate(train_s, test_s, base,
                               log=log if not args.quiet else None)
    out_path = os.path.join(args.out, "ablation.csv")
    with open(out_path, "w") as fh:
        fh.write(reporting.ablation_to_csv(results, base))
    print(f"wrote {out_path}")
    return EXIT_OK


def _cmd_gradcheck(args):
    report = check_all_primitives(seed=args.seed,
                                  inject_broken=args.inject_backward_bug)
    rows = list(report.rows)
    rows.append(model.assembled_loss_check(seed=args.seed,
                                           instances=args.instances))
    failed = [r for r in rows if not r.passed]
    for r in rows:
        mark = "ok  " if r.passed else "FAIL"
        print(f"{mark} {r.name:28s} max_err {r.max_error:.3e}  "
              f"({r.instances} instances)")
    if failed:
        worst = max(failed, key=lambda r: r.max_error)
        print(f"gradient check failed: {len(failed)} of {len(rows)} rows; "
              f"worst {worst.name} at {worst.max_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(rows)} gradient checks passed")
    return EXIT_OK


def _cmd_dump_attention(args):
    cfg, arrays = _load_checkpoint_pair(args.checkpoint)
    samples = load_dataset(args.dataset)
    if args.n > len(samples):
        raise DatasetError(f"asked for {args.n} samples, dataset has "
                           f"{len(samples)}")
    paths = reporting.dump_attention(arrays, cfg, samples, args.n, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def _cmd_export_embeddings(args):
    cfg, arrays = _load_checkpoint_pair(args.checkpoint)
    samples = load_dataset(args.dataset)
    reporting.export_embeddings(arrays, cfg, samples, args.out)
    print(f"wrote {len(samples)} rows to {args.out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="hierattn",
                     description="hierarchical-attention training harness")
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("gen-data", parents=[], help="generate a synthetic dataset",
                        description="Render the synthetic corpus and write "
                        "train/ and test/ dataset directories under --out.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-expressions", type=int, default=7)
    p.add_argument("--n-poses", type=int, default=5)
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--samples-per-cell", type=int, default=20)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = subs.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("dataset", help="dataset directory (labels.jsonl + images/)")
    p.add_argument("--out", required=True, help="output directory for "
                   "checkpoint.bin and metrics.csv")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--batch-size", type=int, default=None,
                   help="evaluation chunk size; default processes the whole "
                   "set in one pass so normalization statistics stay stable")
    p.set_defaults(fn=_cmd_eval)

    p = subs.add_parser("ablate", help="run the component and loss ablation grid")
    p.add_argument("dataset", help="directory containing train/ and test/")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_ablate)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20,
                   help="assembled-loss instances")
    p.add_argument("--inject-backward-bug", action="store_true",
                   help="test hook: add a deliberately wrong backward rule "
                   "(the run must then fail)")
    p.set_defaults(fn=_cmd_gradcheck)

    p = subs.add_parser("dump-attention",
                        help="write mask/crop images and region sidecars")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("-n", type=int, default=1, help="number of samples")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_dump_attention)

    p = subs.add_parser("export-embeddings",
                        help="write the fused representation as CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_embeddings)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
