"""Command-line entry point.

    xfrl [--config PATH] [--seed N] [--out DIR] COMMAND ...

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
failures. Diagnostics go to stderr; results go to files under ``--out``.
``XFRL_THREADS`` sets the number of worker processes for sweeps (default
1); BLAS is pinned to one thread per process so results do not depend on it.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import datasets as D
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config, parse_config_text
from .networks import HeadSpec, NetworkModel
from .protocols import (
    AdaptationPlan,
    TrainConfig,
    evaluate,
    itl_train,
    stl_train,
    train_scratch,
    transferability_sweep,
    transitive_chain,
)
from .report import ReportError, locked_dir, write_report
from .tensor_nn import ShapeError

MODEL_FILE = "model.xfrl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xfrl", description="Layer transferability and MMD adaptation experiments.")
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--seed", type=_seed, default=0, help="seed for data and training (default 0)")
    p.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    g = sub.add_parser("gen-data", help="write synthetic presets as PGM + manifest.csv")
    g.add_argument("presets", nargs="*", help=f"preset names (default: all of {', '.join(D.PRESETS)})")
    sub.add_parser("train", help="train from scratch on the target task")
    sub.add_parser("sweep", help="freeze-and-transfer sweep over k = 1..L")
    sub.add_parser("chain", help="transitive fine-tuning chain over [data] chain")
    a = sub.add_parser("adapt", help="MMD domain adaptation from a source model")
    a.add_argument("--algo", choices=("itl", "stl"), required=True)
    e = sub.add_parser("eval", help="accuracy of a checkpoint on the target test split")
    e.add_argument("--checkpoint", type=Path, help="model file (default: [network] checkpoint)")
    return p


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        if args.command == "gen-data":
            return parse_config_text("[network]\narchitecture = AlexNet_Conv\n")
        raise ConfigError("--config is required for this command")
    return parse_config(args.config)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.output.dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set [output] dir")
    return out


def _task(cfg: ExperimentConfig, name: str, directory: Path | None, seed: int, role: str) -> D.TaskData:
    if directory is not None:
        size = cfg.data.image_size
        train = D.load_manifest(directory, size, "train", role)
        test = D.load_manifest(directory, size, "test", role)
        return D.TaskData(D.standardize(train), D.standardize(test))
    return D.make_task(name, seed, role)


def _target(cfg, seed) -> D.TaskData:
    data = _task(cfg, cfg.data.target, cfg.data.target_dir, seed, "target")
    if cfg.data.train_per_class is not None:
        data = D.TaskData(data.train.per_class(cfg.data.train_per_class), data.test)
    return data


def _source(cfg, seed) -> D.TaskData:
    return _task(cfg, cfg.data.source, cfg.data.source_dir, seed, "source")


def _train_config(cfg, seed) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, t.base_lr, t.lr_multipliers, seed)


def _pretrain_config(cfg, seed) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.source_epochs, t.batch_size, t.source_lr, None, seed)


def _source_model(cfg, seed, source: D.TaskData | None = None) -> NetworkModel:
    if cfg.network.checkpoint is not None:
        return load_checkpoint(cfg.network.checkpoint)
    source = source or _source(cfg, seed)
    head = HeadSpec("classification", source.num_classes)
    model, _ = train_scratch(cfg.network.architecture, head, source, _pretrain_config(cfg, seed), cfg.network.width)
    return model


def _plan(cfg) -> AdaptationPlan:
    a = cfg.adapt
    if not a.adaptation_layers:
        raise ConfigError("missing key adapt.adaptation_layers (required by adapt)")
    return AdaptationPlan(
        offshelf_upto=a.offshelf_upto,
        adaptation_layers=a.adaptation_layers,
        alphas=a.alphas,
        lam=a.lam,
        lambda_decay_factor=a.lambda_decay_factor,
        lambda_decay_at=a.lambda_decay_at,
        estimator=a.estimator,
        num_kernels=a.num_kernels,
        step1_epochs=a.step1_epochs,
        step1_lr_scale=a.step1_lr_scale,
        step2_lambda_factor=a.step2_lambda_factor,
        step2_body_lr_multiplier=a.step2_body_lr_multiplier,
    )


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in rows)


def _workers() -> int:
    raw = os.environ.get("XFRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"XFRL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"XFRL_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, out):
    for name in args.presets or list(D.PRESETS):
        spec = D.preset(name)
        sets = {split: D.gen_synthetic(spec, args.seed, split) for split in ("train", "test")}
        D.write_manifest(out / name, sets, prefix=name)


def cmd_train(args, cfg, out):
    data = _target(cfg, args.seed)
    head = HeadSpec("classification", data.num_classes)
    model, report = train_scratch(cfg.network.architecture, head, data, _train_config(cfg, args.seed), cfg.network.width)
    save_checkpoint(model, out / MODEL_FILE)
    write_report(report, out)


def cmd_sweep(args, cfg, out):
    data = _target(cfg, args.seed)
    source = _source_model(cfg, args.seed)
    report = transferability_sweep(source, data, _train_config(cfg, args.seed), workers=_workers())
    write_report(report, out, svg=cfg.output.svg)


def cmd_chain(args, cfg, out):
    if not cfg.data.chain:
        raise ConfigError("data.chain is empty")
    tasks = []
    for name in cfg.data.chain:
        data = D.make_task(name, args.seed, "source")
        tasks.append((HeadSpec("classification", data.num_classes), data))
    configs = [_pretrain_config(cfg, args.seed)] + [_train_config(cfg, args.seed)] * (len(tasks) - 1)
    model = transitive_chain(cfg.network.architecture, tasks, configs, cfg.network.width)
    save_checkpoint(model, out / MODEL_FILE)


def cmd_adapt(args, cfg, out):
    plan = _plan(cfg)
    data = _target(cfg, args.seed)
    source = _source(cfg, args.seed)
    model = _source_model(cfg, args.seed, source)
    config = _train_config(cfg, args.seed)
    if args.algo == "itl":
        model, report = itl_train(model, source.train, data, plan, config)
    else:
        unlabeled = None
        if cfg.data.unlabeled and cfg.data.target_dir is None:
            unlabeled = D.standardize(D.gen_synthetic(D.preset(cfg.data.target), args.seed, "unlabeled")).images
        model, report = stl_train(model, source.train, data, plan, config, unlabeled=unlabeled)
    save_checkpoint(model, out / MODEL_FILE)
    write_report(report, out)
    _write_rows(out / "result.csv", ["algo", "accuracy"], [[args.algo, report.final_accuracy]])


def cmd_eval(args, cfg, out):
    path = args.checkpoint or cfg.network.checkpoint
    if path is None:
        raise ConfigError("no model: pass eval --checkpoint or set [network] checkpoint")
    model = load_checkpoint(path)
    data = _target(cfg, args.seed)
    _write_rows(out / "eval.csv", ["split", "accuracy"], [["test", evaluate(model, data.test)]])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "chain": cmd_chain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
}

_VALIDATION = (UsageError, ConfigError, CheckpointError, D.DataError, ShapeError, ValueError)


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "xfrl: error: a command is required")
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
    except _VALIDATION as e:
        print(e, file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=1), locked_dir(out) as out:
            COMMANDS[args.command](args, cfg, out)
    except ReportError as e:
        print(f"xfrl: {e}", file=sys.stderr)
        return 2
    except _VALIDATION as e:
        print(f"xfrl: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report, never a traceback
        print(f"xfrl: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
