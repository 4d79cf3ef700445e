"""Command line interface.

Subcommands: ``gen-data``, ``train``, ``eval``, ``ablate``, ``export-attn``.
Every RunConfig key is also a flag (e.g. ``--lr 1e-3``) overriding the
config file.  Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericError, UsageError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="flat key = value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(RunConfig(), f.name)
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, default=None,
                           type=lambda s: s.lower() in ("true", "1", "yes"), metavar="BOOL")
        else:
            p.add_argument(flag, dest=f.name, default=None, type=type(default))


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    return load_config(args.config, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="protoground",
                     description="prototype-bank visual grounding on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate the synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset output directory")

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--out", default=None, help="run output directory (alias for --out-dir)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=["val", "test", "openvocab"])
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("ablate", help="run a toggle/parameter grid")
    _add_config_flags(p)
    p.add_argument("--grid", required=True,
                   help="e.g. 'transform_mode=gaussian,laplacian;k=1,5'")

    p = sub.add_parser("export-attn", help="export attention and gate maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test", "openvocab"])
    p.add_argument("--data-dir", default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        from . import train as TR
        if args.command == "gen-data":
            cfg = _config_from_args(args)
            TR.generate_dataset(cfg, args.out)
            print(f"wrote dataset to {args.out}")
        elif args.command == "train":
            cfg = _config_from_args(args)
            if args.out is not None:
                cfg = dataclasses.replace(cfg, out_dir=args.out)
            result = TR.run_train(cfg, log=print)
            print(f"best val_acc {result['best_val_acc']:.4f} at epoch {result['best_epoch']}; "
                  f"metrics in {result['metrics']}")
        elif args.command == "eval":
            report = TR.run_eval(args.checkpoint, args.split, data_dir=args.data_dir)
            print(f"split={report['split']} n={report['n']} "
                  f"accuracy@0.5={report['accuracy']:.4f} mean_iou={report['mean_iou']:.4f}")
        elif args.command == "ablate":
            cfg = _config_from_args(args)
            TR.run_ablate(cfg, args.grid, log=print)
        elif args.command == "export-attn":
            ids = [int(v) for v in args.ids.split(",") if v.strip()]
            written = TR.run_export_attention(args.checkpoint, ids, args.out,
                                              split=args.split, data_dir=args.data_dir)
            print(f"wrote {len(written)} maps to {args.out}")
        return 0
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
