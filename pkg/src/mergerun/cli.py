"""Command-line front end: train and evaluate networks, dump path-length
censuses, and run the verification suites.

Configuration is a flat key=value text file (``--config``) plus per-key
``--set k=v`` overrides. Exit codes: 0 success, 2 configuration error,
3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import verify as verifymod
from .data import DatasetError
from .netbuilder import ConfigError, NetworkSpec, build_network, parse_kind
from .paths import average_length, blocks_for, distribution_report, enumerate_paths
from .tensor import NumericError
from .train import TrainConfig, evaluate, load_checkpoint, train_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

CONFIG_DEFAULTS = {
    "kind": None,
    "L": "6",
    "B": "2",
    "widths": "16,32,64",
    "width_multiplier": "1",
    "num_classes": "",
    "epochs": "10",
    "batch_size": "64",
    "lr": "0.1",
    "seed": "0",
    "dtype": "float32",
    "data": "synthetic:2:256",
    "out_dir": "out",
}


@dataclass
class RunConfig:
    kind: str
    L: int
    B: int
    widths: tuple
    width_multiplier: int
    num_classes: int
    epochs: int
    batch_size: int
    lr: float
    seed: int
    dtype: str
    data: str
    out_dir: str


def _parse_kv(line, source):
    if "=" not in line:
        raise ConfigError(f"{source}: expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    key, value = key.strip(), value.strip()
    if key not in CONFIG_DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    return key, value


def read_config(path=None, overrides=()):
    """Merge defaults, an optional key=value file, and --set overrides."""
    values = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, value = _parse_kv(line, path)
            values[key] = value
    for item in overrides:
        key, value = _parse_kv(item, "--set")
        values[key] = value
    return values


def _to_int(values, key, minimum=None):
    try:
        v = int(values[key])
    except ValueError:
        raise ConfigError(f"config key {key!r} must be an integer, got {values[key]!r}") from None
    if minimum is not None and v < minimum:
        raise ConfigError(f"config key {key!r} must be >= {minimum}")
    return v


def resolve_config(values):
    if values["kind"] is None:
        raise ConfigError("missing required config key 'kind'")
    kind = values["kind"]
    parse_kind(kind)
    if values["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"config key 'dtype' must be float32 or float64, got {values['dtype']!r}")
    try:
        widths = tuple(int(w) for w in values["widths"].split(","))
    except ValueError:
        raise ConfigError(f"config key 'widths' must be comma-separated ints, got {values['widths']!r}") from None
    try:
        lr = float(values["lr"])
    except ValueError:
        raise ConfigError(f"config key 'lr' must be a float, got {values['lr']!r}") from None
    if lr < 0:
        raise ConfigError("config key 'lr' must be non-negative")

    data = values["data"]
    num_classes = values["num_classes"]
    if num_classes == "":
        if data.startswith("synthetic:"):
            parts = data.split(":")
            num_classes = parts[1] if len(parts) == 3 else ""
        if num_classes == "":
            num_classes = "10"
    values = dict(values, num_classes=num_classes)

    return RunConfig(
        kind=kind,
        L=_to_int(values, "L", 1),
        B=_to_int(values, "B", 1),
        widths=widths,
        width_multiplier=_to_int(values, "width_multiplier", 1),
        num_classes=_to_int(values, "num_classes", 2),
        epochs=_to_int(values, "epochs", 1),
        batch_size=_to_int(values, "batch_size", 1),
        lr=lr,
        seed=_to_int(values, "seed"),
        dtype=values["dtype"],
        data=data,
        out_dir=values["out_dir"],
    )


def load_datasets(cfg):
    """Resolve the ``data`` key into (train, test, augment_default)."""
    spec = cfg.data
    if spec.startswith("cifar10:"):
        train, test = datamod.load_cifar10(spec[len("cifar10:"):], dtype=np.dtype(cfg.dtype))
        return train, test, True
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"data key must be synthetic:<classes>:<N>, got {spec!r}")
        try:
            classes, n = int(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError(f"bad synthetic data spec {spec!r}") from None
        n_test = max(n // 5, classes)
        full = datamod.synthetic_set(classes, n + n_test, cfg.seed, dtype=np.dtype(cfg.dtype))
        means, stds = datamod.compute_channel_stats(full.images[:n])
        train = datamod.LabeledImageSet(full.images[:n], full.labels[:n], means, stds)
        test = datamod.LabeledImageSet(full.images[n:], full.labels[n:], means, stds)
        return train, test, False
    raise ConfigError(f"data key must start with cifar10: or synthetic:, got {spec!r}")


def _network_spec(cfg):
    return NetworkSpec(
        kind=parse_kind(cfg.kind),
        L=cfg.L,
        B=cfg.B,
        stage_widths=cfg.widths,
        width_multiplier=cfg.width_multiplier,
        num_classes=cfg.num_classes,
    )


def _check_label_range(cfg, dataset):
    top = int(dataset.labels.max())
    if top >= cfg.num_classes:
        raise ConfigError(
            f"num_classes={cfg.num_classes} too small for labels up to {top} in {cfg.data!r}"
        )


def cmd_train(cfg):
    train_set, test_set, augment = load_datasets(cfg)
    _check_label_range(cfg, train_set)
    model = build_network(_network_spec(cfg), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    config = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        base_lr=cfg.lr,
        seed=cfg.seed,
        dtype=cfg.dtype,
        augment=augment,
    )
    metrics = train_loop(model, train_set, test_set, config, out_dir=cfg.out_dir)
    last = metrics.rows[-1]
    print(f"done: epochs={cfg.epochs} train_err={last.train_err!r} test_err={last.test_err!r}")
    print(f"wrote {os.path.join(cfg.out_dir, 'metrics.csv')} and checkpoint.mrn")
    return EXIT_OK


def cmd_eval(cfg):
    _, test_set, _ = load_datasets(cfg)
    _check_label_range(cfg, test_set)
    model = build_network(_network_spec(cfg), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.mrn")
    if not os.path.exists(ckpt_path):
        raise ConfigError(f"no checkpoint at {ckpt_path}; set out_dir to a finished run")
    model.load_state(load_checkpoint(ckpt_path))
    err = evaluate(model, test_set)
    print(f"test_err={err!r}")
    return EXIT_OK


def cmd_analyze_paths(cfg):
    if cfg.L > 96:
        raise ConfigError(f"L={cfg.L} too large for path analysis (limit 96)")
    kind = parse_kind(cfg.kind)
    try:
        dist = enumerate_paths(kind, blocks_for(kind, cfg.L), cfg.B)
        closed = average_length(kind, cfg.L, cfg.B)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if dist.mean() != closed:
        raise NumericError(
            f"enumerated mean {dist.mean()} disagrees with closed form {closed}"
        )
    sys.stdout.write(distribution_report(dist))
    return EXIT_OK


def cmd_verify(suites, perturb=0.0):
    try:
        rows = verifymod.run_suites(suites, perturb=perturb)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print("name,max_deviation,tolerance,pass")
    failed = 0
    for row in rows:
        print(f"{row.name},{row.max_deviation!r},{row.tolerance!r},{str(row.passed).lower()}")
        failed += 0 if row.passed else 1
    if failed:
        print(f"# {failed} check(s) failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mergerun",
        description="Train, analyze, and verify merge-and-run networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "analyze-paths"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key")
    v = sub.add_parser("verify")
    v.add_argument("suites", nargs="*", default=[], help=f"suites to run (default: all of {sorted(verifymod.SUITES)})")
    v.add_argument("--perturb", type=float, default=0.0, help="test hook: perturb one rewrite-target weight")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            suites = args.suites or sorted(verifymod.SUITES)
            return cmd_verify(suites, perturb=args.perturb)
        cfg = resolve_config(read_config(args.config, args.set))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_analyze_paths(cfg)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
