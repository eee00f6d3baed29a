"""Command-line driver.

Subcommands: gen-data, train, eval, predict, ablate, finetune. Configuration
comes from a ``key = value`` file plus repeatable ``--set section.key=value``
overrides. Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import (CheckpointMismatchError, ConfigError, DataError,
                     NumericError, NutriscopeError)
from .losses import PmaeReport
from .synth import generate_dataset
from .training import ablate, evaluate, finetune, predict, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _add_config_args(parser):
    parser.add_argument("--config", help="path to a config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nutriscope",
        description="Nutrition estimation from single RGB images, end to end.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_config_args(p)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--data-root", default=None)

    p = sub.add_parser("predict", help="predict nutrition for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--depth", default=None,
                   help="depth tensor file for models with a depth branch")

    p = sub.add_parser("ablate", help="run the four cumulative module rows")
    _add_config_args(p)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_config_args(p)
    return parser


def _cmd_gen_data(args):
    cfg = load_config(args.config, args.overrides)
    d = cfg.data
    records = generate_dataset(
        d.root, samples=d.samples, canvas=d.canvas, items_min=d.items_min,
        items_max=d.items_max, split_train=d.split_train,
        split_test=d.split_test, master_seed=d.master_seed,
        pool_size=d.pool_size, baseline_distance=d.baseline_distance,
        previews=d.previews,
    )
    train_n = sum(1 for r in records if r.split == "train")
    print(f"wrote {len(records)} samples to {d.root} "
          f"({train_n} train / {len(records) - train_n} test)")


def _cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    result = train(cfg)
    final = result.log[-1] if result.log else {}
    print(f"trained {cfg.train.epochs} epochs; checkpoints at {result.checkpoint_dir}"
          f" (best: {result.best_dir})")
    if "val_pmae_mean" in final:
        print(f"final validation mean PMAE: {final['val_pmae_mean'] * 100:.2f}%")


def _cmd_eval(args):
    report = evaluate(args.checkpoint, split=args.split, data_root=args.data_root)
    print(report)
    print(json.dumps(report.to_dict(), sort_keys=True))


def _cmd_predict(args):
    record = predict(args.checkpoint, args.image, depth_path=args.depth)
    for task, value in record["prediction"].items():
        print(f"{task:>13s}: {value:10.2f} {record['units'][task]}")
    print(json.dumps(record, sort_keys=True))


def _cmd_ablate(args):
    cfg = load_config(args.config, args.overrides)
    reports = ablate(cfg)
    print(PmaeReport.table_header())
    for report in reports:
        print(report.table_row())


def _cmd_finetune(args):
    cfg = load_config(args.config, args.overrides)
    result = finetune(args.checkpoint, cfg)
    print(f"finetuned {cfg.train.epochs} epochs; checkpoints at {result.checkpoint_dir}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
    "finetune": _cmd_finetune,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointMismatchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NutriscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
