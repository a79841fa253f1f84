"""Command line entry point.

Precedence for run settings: command-line flags > ``--config`` file >
``SLENET_DEVICE`` (device only) > built-in defaults.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from slenet.datapipe import build_manifest
from slenet.errors import ConfigError, DataError, SlenetError
from slenet.pipeline import RunConfig, ablate, evaluate, mu_sweep, predict, train

log = logging.getLogger("slenet")

DEVICE_ENV = "SLENET_DEVICE"


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _channels(s: str) -> tuple[int, ...]:
    return tuple(int(c) for c in s.split(","))


_FIELD_TYPES = {"channels": _channels, "encoder_checkpoint": str}


def add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON file with RunConfig fields")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default_type = type(f.default) if f.default is not None else str
        conv = _FIELD_TYPES.get(f.name, _bool if default_type is bool else default_type)
        p.add_argument(flag, dest=f.name, type=conv, default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if os.environ.get(DEVICE_ENV):
        values["device"] = os.environ[DEVICE_ENV]
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on <data-root>/<split>")
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lenient", action="store_true", help="skip unpaired files instead of failing")
    add_run_flags(p)

    p = sub.add_parser("eval", help="predict and score a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--lenient", action="store_true")

    p = sub.add_parser("predict", help="write grayscale prediction maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true", help="also write red overlay images")

    for name, help_ in (("mu-sweep", "train and score one run per mu"),
                        ("ablate", "train and score each module combination")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data-root", required=True)
        p.add_argument("--split", default="train")
        p.add_argument("--eval-split", default=None)
        p.add_argument("--lenient", action="store_true")
        if name == "mu-sweep":
            p.add_argument("--values", type=lambda s: [float(v) for v in s.split(",")],
                           default=[0.2, 0.4, 0.6, 0.8])
        else:
            p.add_argument("--params-only", action="store_true", help="census parameters without training")
        add_run_flags(p)
    return parser


def _manifest(args, split):
    return build_manifest(args.data_root, split, strict=not args.lenient)


def run(args: argparse.Namespace) -> int:
    device = os.environ.get(DEVICE_ENV)
    if args.command == "train":
        config = resolve_config(args)
        result = train(config, _manifest(args, args.split), resume=args.resume)
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"final loss: {result.history[-1]['loss']:.4f}")
        return 0
    if args.command == "eval":
        report = evaluate(args.checkpoint, _manifest(args, args.split), args.out, device=device)
        print(json.dumps(report.means, indent=1))
        if not report.ok:
            log.error("%d unpaired file(s): %s", len(report.missing), ", ".join(report.missing))
            return DataError.exit_code
        return 0
    if args.command == "predict":
        written = predict(args.checkpoint, args.images, args.out, overlay=args.overlay, device=device)
        print(f"wrote {len(written)} prediction(s) to {args.out}")
        return 0
    config = resolve_config(args)
    manifest = _manifest(args, args.split)
    eval_manifest = _manifest(args, args.eval_split) if args.eval_split else None
    if args.command == "mu-sweep":
        rows = mu_sweep(config, manifest, eval_manifest, values=args.values)
    else:
        rows = ablate(config, manifest, eval_manifest, train_models=not args.params_only)
    for row in rows:
        print(json.dumps(row))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except SlenetError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
