"""Command-line entry point: ``duia gen-data | train | eval | inspect``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import DEFAULT_CONFIG_PATH, ConfigError, ExperimentConfig, load_config
from .data import DataError, generate, load_dataset, save_dataset, temporal_split
from .ghca import SnapshotError
from .metrics import write_metrics
from .model import DUIARanker, NumericError
from .report import inspect_text
from .snapshot import snapshot_load, snapshot_save

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(path, seed=None, single_pass=False) -> ExperimentConfig:
    cfg = load_config(path if path else DEFAULT_CONFIG_PATH)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if single_pass:
        cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, single_pass=True))
    return cfg.validate()


def _load_split(path, train_fraction):
    try:
        log, features, _ = load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc}") from None
    if len(log) < 2:
        raise DataError(f"{path}: need at least two events")
    train, test = temporal_split(log, train_fraction)
    return train, test, features


def cmd_gen_data(args) -> int:
    cfg = _config(args.config, args.seed)
    ds = generate(cfg.generator, cfg.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.events)} events to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config, args.seed, args.single_pass)
    train, test, features = _load_split(args.data, cfg.data.train_fraction)
    model = DUIARanker(cfg).fit(train, features, eval_log=test)
    snapshot_save(model.network_, args.snapshot_out)
    write_metrics(model.metrics_, args.metrics_out, include_timing=args.timing)
    last = model.metrics_[-1]
    print(json.dumps({"step": last.step, "auc": last.auc}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    net = snapshot_load(args.snapshot)
    train, test, features = _load_split(args.data, net.cfg.data.train_fraction)
    model = DUIARanker.from_network(net, train, features)
    rec = model.evaluate(test)
    with open(args.metrics_out, "a") as fh:
        fh.write(rec.to_json(include_timing=args.timing) + "\n")
    print(json.dumps({"auc": rec.auc, "hit_rate": rec.hit_rate}, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    net = snapshot_load(args.snapshot)
    Path(args.out).write_text(inspect_text(net))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duia", description="DUIA ranking: data generation, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic CSV plus ground-truth sidecar")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on the first part of a CSV, evaluate on the rest")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--snapshot-out", required=True)
    t.add_argument("--metrics-out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--single-pass", action="store_true", help="one streaming pass instead of epochs")
    t.add_argument("--timing", action="store_true", help="include wall-clock seconds in metrics records")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score the test split with a saved model; appends one metrics record")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics-out", required=True)
    e.add_argument("--timing", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="write a JSON cluster-utilization report")
    i.add_argument("--snapshot", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SnapshotError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
