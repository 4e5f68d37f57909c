"""Experiment configuration files.

A config is a sequence of ``[section]`` headers and ``key = value`` lines;
``#`` starts a comment. Parsing is fail-closed: unknown sections or keys,
bad values and duplicates are all reported with their line numbers. Paths
are resolved relative to the directory holding the config file.

Sections and keys (defaults in brackets)::

    [network]  architecture (required), width [1.0], checkpoint [none]
    [data]     target [tgt3], target_dir, source [src5], source_dir,
               chain [src5, mid3], train_per_class [all], unlabeled [false],
               image_size [64, manifests only]
    [train]    epochs [30], batch_size [32], base_lr [0.01],
               lr_multipliers [none], source_epochs [8], source_lr [0.05]
    [adapt]    offshelf_upto [0], adaptation_layers [none], alphas [1 each],
               lambda [1.5], lambda_decay_factor [0.1], lambda_decay_at [0.7],
               estimator [linear], num_kernels [5], step1_epochs [20],
               step1_lr_scale [1.0], step2_lambda_factor [0.1],
               step2_body_lr_multiplier [0.01]
    [output]   dir [none], svg [false]
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .networks import ARCHITECTURES


class ConfigError(ValueError):
    pass


def _int(s: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", s):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _bool(s: str) -> bool:
    table = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
    if s.lower() not in table:
        raise ValueError(f"expected true/false, got {s!r}")
    return table[s.lower()]


def _str(s: str) -> str:
    if not s:
        raise ValueError("empty value")
    return s


def _list(item: Callable) -> Callable:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",")]
        if not s.strip() or any(not p for p in parts):
            raise ValueError(f"expected a comma-separated list, got {s!r}")
        return tuple(item(p) for p in parts)

    return parse


def _choice(*options: str) -> Callable:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s

    return parse


_PATH = object()  # marker: resolve relative to the config file


@dataclass
class NetworkSection:
    architecture: str = ""
    width: float = 1.0
    checkpoint: Path | None = None


@dataclass
class DataSection:
    target: str = "tgt3"
    target_dir: Path | None = None
    source: str = "src5"
    source_dir: Path | None = None
    chain: tuple[str, ...] = ("src5", "mid3")
    train_per_class: int | None = None
    unlabeled: bool = False
    image_size: int = 64  # manifests only; presets carry their own size


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.01
    lr_multipliers: tuple[float, ...] | None = None
    source_epochs: int = 8
    source_lr: float = 0.05


@dataclass
class AdaptSection:
    offshelf_upto: int = 0
    adaptation_layers: tuple[int, ...] = ()
    alphas: tuple[float, ...] | None = None
    lam: float = 1.5
    lambda_decay_factor: float = 0.1
    lambda_decay_at: float = 0.7
    estimator: str = "linear"
    num_kernels: int = 5
    step1_epochs: int = 20
    step1_lr_scale: float = 1.0
    step2_lambda_factor: float = 0.1
    step2_body_lr_multiplier: float = 0.01


@dataclass
class OutputSection:
    dir: Path | None = None
    svg: bool = False


@dataclass
class ExperimentConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    output: OutputSection = field(default_factory=OutputSection)
    source_path: Path | None = None
    lines: dict[tuple[str, str], int] = field(default_factory=dict)  # where each key was set


# key -> (attribute name, parser); _PATH marks a path
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "network": {
        "architecture": ("architecture", _choice(*ARCHITECTURES)),
        "width": ("width", _float),
        "checkpoint": ("checkpoint", _PATH),
    },
    "data": {
        "target": ("target", _str),
        "target_dir": ("target_dir", _PATH),
        "source": ("source", _str),
        "source_dir": ("source_dir", _PATH),
        "chain": ("chain", _list(_str)),
        "train_per_class": ("train_per_class", _int),
        "unlabeled": ("unlabeled", _bool),
        "image_size": ("image_size", _int),
    },
    "train": {
        "epochs": ("epochs", _int),
        "batch_size": ("batch_size", _int),
        "base_lr": ("base_lr", _float),
        "lr_multipliers": ("lr_multipliers", _list(_float)),
        "source_epochs": ("source_epochs", _int),
        "source_lr": ("source_lr", _float),
    },
    "adapt": {
        "offshelf_upto": ("offshelf_upto", _int),
        "adaptation_layers": ("adaptation_layers", _list(_int)),
        "alphas": ("alphas", _list(_float)),
        "lambda": ("lam", _float),
        "lambda_decay_factor": ("lambda_decay_factor", _float),
        "lambda_decay_at": ("lambda_decay_at", _float),
        "estimator": ("estimator", _choice("linear", "quadratic")),
        "num_kernels": ("num_kernels", _int),
        "step1_epochs": ("step1_epochs", _int),
        "step1_lr_scale": ("step1_lr_scale", _float),
        "step2_lambda_factor": ("step2_lambda_factor", _float),
        "step2_body_lr_multiplier": ("step2_body_lr_multiplier", _float),
    },
    "output": {
        "dir": ("dir", _PATH),
        "svg": ("svg", _bool),
    },
}

_SECTION_RE = re.compile(r"\[\s*([A-Za-z_]\w*)\s*\]")
_KEY_RE = re.compile(r"([A-Za-z_]\w*)\s*=\s*(.*)")


def parse_config_text(text: str, base_dir: Path = Path("."), name: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    section: str | None = None
    section_lines: dict[str, int] = {}

    def fail(lineno: int, msg: str):
        raise ConfigError(f"{name}:{lineno}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if m := _SECTION_RE.fullmatch(line):
            section = m.group(1)
            if section not in _SCHEMA:
                fail(lineno, f"unknown section [{section}]")
            if section in section_lines:
                fail(lineno, f"section [{section}] repeated (first at line {section_lines[section]})")
            section_lines[section] = lineno
            continue
        m = _KEY_RE.fullmatch(line)
        if m is None:
            fail(lineno, f"expected '[section]' or 'key = value', got {raw.strip()!r}")
        if section is None:
            fail(lineno, "key outside of any section")
        key, value = m.group(1), m.group(2).strip()
        if key not in _SCHEMA[section]:
            fail(lineno, f"unknown key {key!r} in [{section}]")
        if (section, key) in cfg.lines:
            fail(lineno, f"duplicate key {section}.{key} (lines {cfg.lines[section, key]} and {lineno})")
        attr, parser = _SCHEMA[section][key]
        try:
            parsed = (base_dir / _str(value)) if parser is _PATH else parser(value)
        except ValueError as e:
            fail(lineno, f"{section}.{key}: {e}")
        setattr(getattr(cfg, section), attr, parsed)
        cfg.lines[section, key] = lineno

    if not cfg.network.architecture:
        where = f"[network] at line {section_lines['network']}" if "network" in section_lines else "no [network] section"
        raise ConfigError(f"{name}: missing required key network.architecture ({where})")
    _validate(cfg, fail)
    return cfg


def _validate(cfg: ExperimentConfig, fail) -> None:
    def line(section, key):
        return cfg.lines.get((section, key), 0)

    t, a = cfg.train, cfg.adapt
    if t.batch_size < 2 or t.batch_size % 2:
        fail(line("train", "batch_size"), f"train.batch_size must be even and >= 2, got {t.batch_size}")
    for key in ("epochs", "source_epochs"):
        if getattr(t, key) < 0:
            fail(line("train", key), f"train.{key} must be nonnegative")
    for key in ("base_lr", "source_lr"):
        if not getattr(t, key) > 0:
            fail(line("train", key), f"train.{key} must be positive")
    if not cfg.network.width > 0:
        fail(line("network", "width"), "network.width must be positive")
    if cfg.data.train_per_class is not None and cfg.data.train_per_class < 1:
        fail(line("data", "train_per_class"), "data.train_per_class must be positive")
    if cfg.data.image_size < 4:
        fail(line("data", "image_size"), "data.image_size too small")
    if a.lam < 0:
        fail(line("adapt", "lambda"), "adapt.lambda must be nonnegative")
    if a.alphas is not None:
        if min(a.alphas) < 0:
            fail(line("adapt", "alphas"), "adapt.alphas must be nonnegative")
        if len(a.alphas) != len(a.adaptation_layers):
            fail(line("adapt", "alphas"), "adapt.alphas needs one value per adaptation layer")
    if not 0 <= a.lambda_decay_at <= 1:
        fail(line("adapt", "lambda_decay_at"), "adapt.lambda_decay_at must lie in [0, 1]")
    if a.num_kernels < 1:
        fail(line("adapt", "num_kernels"), "adapt.num_kernels must be positive")
    if a.step1_epochs < 0:
        fail(line("adapt", "step1_epochs"), "adapt.step1_epochs must be nonnegative")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: cannot read config ({e})") from None
    cfg = parse_config_text(text, path.parent, str(path))
    cfg.source_path = path
    return cfg

