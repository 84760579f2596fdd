"""Command line entry point.

Subcommands: train, coverage, spectrum-audit, profile,
inspect-checkpoint.  Settings resolve in order: built-in defaults, then
--config file pairs, then arbitrary ``--key value`` overrides, then the
dedicated --seed/--out/--precision flags.  Unknown keys are rejected
with the valid vocabulary.

Exit codes: 0 success, 2 configuration error, 3 I/O error (missing
files, bad checkpoints), 4 numerical failure (non-finite loss or
gradients).
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import load_checkpoint
from .config import TrainConfig, config_from_mapping, parse_config_file
from .errors import CheckpointError, ConfigError, DataError, NumericsError
from .runner import run_coverage, run_profile, run_spectrum_audit, run_train

_TASK_FOR_COMMAND = {
    "coverage": "coverage",
    "spectrum-audit": "spectrum-audit",
    "profile": "profile",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="", metavar="PATH", help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, metavar="DIR", help="output directory")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None,
                   help="float precision in bits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poetx",
        description="Train and inspect linear layers reparameterized by "
                    "block-stochastic orthogonal equivalence transforms.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the regression or char-lm task",
        "coverage": "simulate per-entry weight update coverage",
        "spectrum-audit": "measure singular-value drift across merges",
        "profile": "count and time the forward/backward strategies",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, allow_abbrev=False)
        _add_common(p)
    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's config and tensor table")
    p.add_argument("path", help="checkpoint file")
    return parser


def _parse_overrides(tokens: list) -> dict:
    """Leftover CLI tokens as config overrides: --key value or --key=value."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override --{key} is missing a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def resolve_config(args: argparse.Namespace, extra: list) -> TrainConfig:
    mapping = parse_config_file(args.config) if args.config else {}
    mapping.update(_parse_overrides(extra))
    if args.command in _TASK_FOR_COMMAND:
        mapping["task"] = _TASK_FOR_COMMAND[args.command]
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.out is not None:
        mapping["out_dir"] = args.out
    if args.precision is not None:
        mapping["precision"] = str(args.precision)
    return config_from_mapping(mapping)


def _inspect(path: str) -> int:
    tensors, cfg_text = load_checkpoint(path)
    print(f"checkpoint: {path}")
    print(f"tensors: {len(tensors)}")
    for name, arr in tensors.items():
        print(f"  {name:44s} {str(arr.dtype):8s} {str(arr.shape):16s} {arr.nbytes} bytes")
    print("config:")
    for line in cfg_text.strip().splitlines():
        print(f"  {line}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            if extra:
                raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
            return _inspect(args.path)
        cfg = resolve_config(args, extra)
        if args.command == "train":
            run_train(cfg)
        elif args.command == "coverage":
            run_coverage(cfg)
        elif args.command == "spectrum-audit":
            run_spectrum_audit(cfg)
        elif args.command == "profile":
            run_profile(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
