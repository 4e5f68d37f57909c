"""Training procedures: scratch, fine-tune, freeze-and-transfer sweeps,
transitive chains, and the integrated (ITL) and two-step (STL) MMD
adaptation trainers.

All randomness flows from ``TrainConfig.seed``. The target mini-batch order
and the source mini-batch order come from separate streams, so switching the
transfer loss on or off never changes which target samples a step sees.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from . import mmd as mmdlib
from .datasets import LabeledSet, TaskData
from .networks import HeadSpec, NetworkModel, build, surgery_transfer
from .tensor_nn import sgd_step, softmax_xent

TARGET_STREAM = 11
SOURCE_STREAM = 12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 0.01
    lr_multipliers: tuple[float, ...] | None = None  # per block, then head
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass(frozen=True)
class AdaptationPlan:
    offshelf_upto: int
    adaptation_layers: tuple[int, ...]
    alphas: tuple[float, ...] | None = None  # default 1 per adaptation layer
    lam: float = 1.5
    lambda_decay_factor: float = 0.1
    lambda_decay_at: float = 0.7
    estimator: Literal["linear", "quadratic"] = "linear"
    num_kernels: int = 5
    step1_epochs: int = 20
    step1_lr_scale: float = 1.0
    step2_lambda_factor: float = 0.1
    step2_body_lr_multiplier: float = 0.01  # body lr = 1/100 of the head lr

    def __post_init__(self):
        if not self.adaptation_layers:
            raise ValueError("adaptation_layers must be nonempty")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.alphas is not None:
            if len(self.alphas) != len(self.adaptation_layers):
                raise ValueError("need one alpha per adaptation layer")
            if min(self.alphas) < 0:
                raise ValueError("alphas must be nonnegative")
        if min(self.adaptation_layers) <= self.offshelf_upto:
            raise ValueError("adaptation layers must lie above the off-the-shelf layers")
        if self.estimator not in ("linear", "quadratic"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @property
    def alpha_map(self) -> dict[int, float]:
        alphas = self.alphas or (1.0,) * len(self.adaptation_layers)
        return dict(zip(self.adaptation_layers, alphas))

    def validate_for(self, model: NetworkModel) -> None:
        if not 0 <= self.offshelf_upto < model.depth:
            raise ValueError(f"offshelf_upto {self.offshelf_upto} out of range for depth {model.depth}")
        if max(self.adaptation_layers) > model.depth:
            raise ValueError(f"adaptation layer {max(self.adaptation_layers)} exceeds depth {model.depth}")


@dataclass
class StepRecord:
    epoch: int
    phase: str
    loss_cls: float | None
    mmd: dict[int, float]
    lam: float
    loss_total: float


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss_cls: float | None
    mmd: dict[int, float]
    loss_total: float
    test_acc: float | None


@dataclass
class SweepPoint:
    k: int
    accuracy: float
    relative_accuracy: float


@dataclass
class ExperimentReport:
    name: str = ""
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    final_accuracy: float | None = None
    sweep: list[SweepPoint] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def relative(self, k: int) -> float:
        return next(p.relative_accuracy for p in self.sweep if p.k == k)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: NetworkModel, test: LabeledSet) -> float:
    """Fraction of argmax-correct predictions; ties go to the lower index."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if model.head_spec.task != "classification":
        raise ValueError("evaluate needs a classification head")
    pred = np.argmax(model.predict_logits(test.images), axis=1)
    return float(np.mean(pred == test.labels))


def diagnostic_mmd(model: NetworkModel, src_images, tgt_images, layer: int, num_kernels: int = 5) -> float:
    """Quadratic MMD^2 between block-``layer`` features, median-heuristic bank."""
    fs = _features(model, src_images, layer)
    ft = _features(model, tgt_images, layer)
    return mmdlib.mmd2_quadratic(fs, ft, mmdlib.bank_for(fs, ft, num_kernels))


def _features(model, images, layer, batch_size=128):
    out = [model.forward(images[i : i + batch_size], upto=layer)[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out).reshape(len(images), -1)


# ---------------------------------------------------------------------------
# the shared loop


def _check_data(data: TaskData) -> None:
    if len(data.train) == 0 or len(data.test) == 0:
        raise ValueError("train and test splits must be nonempty")


def _apply_lr(model: NetworkModel, config: TrainConfig) -> None:
    if config.lr_multipliers is not None:
        model.set_lr_multipliers(config.lr_multipliers)


class _SourceStream:
    """Endless source mini-batches, reshuffled at each pass."""

    def __init__(self, source: LabeledSet, seed: int):
        self.images = source.images
        self.rng = np.random.default_rng([seed, SOURCE_STREAM])
        self.order = self.rng.permutation(len(source))
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        idx = []
        while len(idx) < n:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(len(self.order))
                self.pos = 0
            step = min(n - len(idx), len(self.order) - self.pos)
            idx.extend(self.order[self.pos : self.pos + step])
            self.pos += step
        return self.images[np.asarray(idx)]


def _lambda_at(plan: AdaptationPlan, lam: float, epoch: int, epochs: int) -> float:
    decay_epoch = math.floor(plan.lambda_decay_at * epochs)
    return lam * plan.lambda_decay_factor if epoch >= decay_epoch else lam


def total_loss(loss_cls: float | None, mmd_values: dict[int, float], lam: float, plan: AdaptationPlan | None) -> float:
    """Classification loss plus ``lam * sum(alpha_l * mmd_l)``."""
    transfer = lam * sum(plan.alpha_map[l] * v for l, v in mmd_values.items()) if mmd_values else 0.0
    return (loss_cls or 0.0) + transfer


def _transfer_grads(feats: dict, n_tgt: int, plan: AdaptationPlan, weight: float):
    """Per-layer MMD values and feature gradients; target rows come first."""
    values, grads = {}, {}
    alphas = plan.alpha_map
    for l in plan.adaptation_layers:
        f = feats[l].reshape(len(feats[l]), -1)
        ft, fs = f[:n_tgt], f[n_tgt:]
        bank = mmdlib.bank_for(fs, ft, plan.num_kernels)
        val, gs, gt = mmdlib.mmd_grad(fs, ft, bank, plan.estimator)
        values[l] = val
        grads[l] = (weight * alphas[l]) * np.concatenate([gt, gs])
    return values, grads


def _train_loop(
    model: NetworkModel,
    data: TaskData,
    config: TrainConfig,
    report: ExperimentReport,
    phase: str = "train",
    source: LabeledSet | None = None,
    plan: AdaptationPlan | None = None,
    lam: float = 0.0,
) -> None:
    """Supervised training on ``data.train``; with ``plan`` and ``lam > 0``
    each target batch is paired with an equal-size source batch and the
    weighted transfer loss joins the objective."""
    train = data.train
    rng = np.random.default_rng([config.seed, TARGET_STREAM])
    stream = _SourceStream(source, config.seed) if source is not None else None
    classify = model.head_spec.task == "classification"
    for epoch in range(config.epochs):
        lam_e = _lambda_at(plan, lam, epoch, config.epochs) if plan is not None else 0.0
        perm = rng.permutation(len(train))
        steps = []
        for start in range(0, len(train), config.batch_size):
            idx = perm[start : start + config.batch_size]
            xt = train.images[idx]
            use_transfer = plan is not None and lam_e > 0 and len(idx) >= 2
            if use_transfer:
                xs = stream.take(len(idx))
                out, feats = model.forward(np.concatenate([xt, xs]), taps=plan.adaptation_layers)
                out = out[: len(idx)]
            else:
                out, feats = model.forward(xt)
            loss_cls, g = model.loss(out, xt, train.labels[idx])
            mmd_vals: dict[int, float] = {}
            fgrads = None
            if use_transfer:
                mmd_vals, fgrads = _transfer_grads(feats, len(idx), plan, lam_e)
                g = np.concatenate([g, np.zeros((len(xs),) + g.shape[1:])])
            model.backward(g, fgrads)
            sgd_step(model.params(), config.base_lr)
            total = total_loss(loss_cls, mmd_vals, lam_e, plan)
            steps.append(StepRecord(epoch, phase, loss_cls, mmd_vals, lam_e, total))
        report.steps += steps
        report.epochs.append(_epoch_summary(epoch, phase, steps, model, data.test if classify else None))


def _epoch_summary(epoch, phase, steps, model, test) -> EpochRecord:
    cls = [s.loss_cls for s in steps if s.loss_cls is not None]
    layers = sorted({l for s in steps for l in s.mmd})
    mmd_mean = {l: float(np.mean([s.mmd[l] for s in steps if l in s.mmd])) for l in layers}
    return EpochRecord(
        epoch=epoch,
        phase=phase,
        loss_cls=float(np.mean(cls)) if cls else None,
        mmd=mmd_mean,
        loss_total=float(np.mean([s.loss_total for s in steps])),
        test_acc=evaluate(model, test) if test is not None else None,
    )


def _finish(model, data, report):
    if model.head_spec.task == "classification":
        report.final_accuracy = evaluate(model, data.test)
    return model, report


# ---------------------------------------------------------------------------
# protocols


def train_scratch(
    architecture: str, head: HeadSpec, data: TaskData, config: TrainConfig, width: float = 1.0
) -> tuple[NetworkModel, ExperimentReport]:
    _check_data(data)
    model = build(architecture, head, data.input_shape, config.seed, width)
    _apply_lr(model, config)
    report = ExperimentReport(name="scratch")
    _train_loop(model, data, config, report)
    return _finish(model, data, report)


def _target_head(data: TaskData) -> HeadSpec:
    return HeadSpec("classification", data.num_classes)


def _check_compatible(source: NetworkModel, data: TaskData) -> None:
    if tuple(source.input_shape) != tuple(data.input_shape):
        raise ValueError(f"input shape {data.input_shape} does not match source model {source.input_shape}")


def transfer_freeze_train(
    source_model: NetworkModel, k: int, data: TaskData, config: TrainConfig, architecture: str | None = None
) -> tuple[NetworkModel, ExperimentReport]:
    """Copy and freeze blocks ``1..k`` of the source, train the rest on the target."""
    if architecture is not None and architecture != source_model.architecture:
        raise ValueError(f"architecture mismatch: {architecture} vs source {source_model.architecture}")
    _check_data(data)
    _check_compatible(source_model, data)
    model = surgery_transfer(source_model, k, True, _target_head(data), config.seed)
    _apply_lr(model, config)
    frozen = [p.value.copy() for l in range(1, k + 1) for p in model.block_params(l)]
    report = ExperimentReport(name=f"freeze_k{k}")
    _train_loop(model, data, config, report)
    after = [p.value for l in range(1, k + 1) for p in model.block_params(l)]
    if any(not np.array_equal(a, b) for a, b in zip(frozen, after)):
        raise RuntimeError("frozen layers changed during training")
    return _finish(model, data, report)


def finetune_train(source_model: NetworkModel, data: TaskData, config: TrainConfig) -> tuple[NetworkModel, ExperimentReport]:
    """Copy every block, new head, train all layers."""
    _check_data(data)
    _check_compatible(source_model, data)
    model = surgery_transfer(source_model, source_model.depth, False, _target_head(data), config.seed)
    _apply_lr(model, config)
    report = ExperimentReport(name="finetune")
    _train_loop(model, data, config, report)
    return _finish(model, data, report)


def _sweep_point(args):
    source_model, k, data, config = args
    return transfer_freeze_train(source_model, k, data, config)[1].final_accuracy


def transferability_sweep(
    source_model: NetworkModel,
    data: TaskData,
    config: TrainConfig,
    ks: Sequence[int] | None = None,
    baseline: float | None = None,
    workers: int = 1,
) -> ExperimentReport:
    """Scratch baseline (reported as ``k = 0``) and one frozen transfer per ``k``."""
    ks = list(range(1, source_model.depth + 1)) if ks is None else list(ks)
    if baseline is None:
        _, base_report = train_scratch(source_model.architecture, _target_head(data), data, config, source_model.width)
        baseline = base_report.final_accuracy
    jobs = [(source_model, k, data, config) for k in ks]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_sweep_point, jobs))
    else:
        accs = [_sweep_point(j) for j in jobs]
    report = ExperimentReport(name="sweep")
    report.sweep.append(SweepPoint(0, baseline, 0.0))
    for k, acc in sorted(zip(ks, accs)):
        report.sweep.append(SweepPoint(k, acc, acc - baseline))
    return report


def transitive_chain(
    architecture: str,
    tasks: Sequence[tuple[HeadSpec, TaskData]],
    configs: Sequence[TrainConfig] | TrainConfig,
    width: float = 1.0,
) -> NetworkModel:
    """Train on the first task, then fine-tune all layers on each following
    task with a fresh head. Tasks should be ordered from least to most
    similar to the eventual target."""
    if not tasks:
        raise ValueError("task sequence is empty")
    if isinstance(configs, TrainConfig):
        configs = [configs] * len(tasks)
    if len(configs) != len(tasks):
        raise ValueError("need one config per task")
    shapes = {tuple(d.input_shape) for _, d in tasks}
    if len(shapes) != 1:
        raise ValueError(f"incompatible input shapes across tasks: {sorted(shapes)}")
    head, data = tasks[0]
    model, _ = train_scratch(architecture, head, data, configs[0], width)
    for (head, data), cfg in zip(tasks[1:], configs[1:]):
        _check_data(data)
        model = surgery_transfer(model, model.depth, False, head, cfg.seed)
        _apply_lr(model, cfg)
        _train_loop(model, data, cfg, ExperimentReport())
    return model


def itl_train(
    source_model: NetworkModel, source_set: LabeledSet, data: TaskData, plan: AdaptationPlan, config: TrainConfig
) -> tuple[NetworkModel, ExperimentReport]:
    """Fine-tune all layers on target labels plus lambda-weighted MMD at the adaptation layers."""
    _check_data(data)
    _check_compatible(source_model, data)
    plan.validate_for(source_model)
    model = surgery_transfer(source_model, source_model.depth, False, _target_head(data), config.seed)
    _apply_lr(model, config)
    report = ExperimentReport(name="itl")
    _train_loop(model, data, config, report, "itl", source_set, plan, plan.lam)
    return _finish(model, data, report)


def _stl_step1(model, source_set, target_images, plan, config, report):
    rng = np.random.default_rng([config.seed, TARGET_STREAM])
    stream = _SourceStream(source_set, config.seed)
    top = max(plan.adaptation_layers)
    for epoch in range(plan.step1_epochs):
        perm = rng.permutation(len(target_images))
        steps = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            xs = stream.take(len(idx))
            _, feats = model.forward(np.concatenate([target_images[idx], xs]), taps=plan.adaptation_layers, upto=top)
            vals, fgrads = _transfer_grads(feats, len(idx), plan, plan.lam)
            model.backward(None, fgrads)
            sgd_step(model.params(), config.base_lr * plan.step1_lr_scale)
            total = total_loss(None, vals, plan.lam, plan)
            steps.append(StepRecord(epoch, "stl1", None, vals, plan.lam, total))
        report.steps += steps
        report.epochs.append(_epoch_summary(epoch, "stl1", steps, model, None))


def stl_train(
    source_model: NetworkModel,
    source_set: LabeledSet,
    data: TaskData,
    plan: AdaptationPlan,
    config: TrainConfig,
    unlabeled: np.ndarray | None = None,
    diagnostic_source: np.ndarray | None = None,
) -> tuple[NetworkModel, ExperimentReport]:
    """Two steps. Step 1 freezes blocks ``1..k`` and trains the adaptation
    layers on the transfer loss alone (target labels unused; extra
    ``unlabeled`` target images may be supplied). Step 2 unfreezes
    everything and trains classification plus the transfer loss with
    lambda scaled by ``plan.step2_lambda_factor``, the body at
    ``step2_body_lr_multiplier`` times the head learning rate (see
    :func:`stl_step2_config`)."""
    _check_data(data)
    _check_compatible(source_model, data)
    plan.validate_for(source_model)
    report = ExperimentReport(name="stl")
    model = surgery_transfer(source_model, source_model.depth, False, _target_head(data), config.seed)
    _apply_lr(model, config)
    model.freeze_upto(plan.offshelf_upto)

    target_images = data.train.images if unlabeled is None else np.concatenate([data.train.images, unlabeled])
    diag_src = source_set.images[:256] if diagnostic_source is None else diagnostic_source
    before = {l: diagnostic_mmd(model, diag_src, target_images, l, plan.num_kernels) for l in plan.adaptation_layers}
    _stl_step1(model, source_set, target_images, plan, config, report)
    after = {l: diagnostic_mmd(model, diag_src, target_images, l, plan.num_kernels) for l in plan.adaptation_layers}
    report.diagnostics["step1_mmd_before"] = before
    report.diagnostics["step1_mmd_after"] = after

    model.freeze_upto(0)
    _, step2 = stl_step2_config(plan, config, model.depth)
    model.set_lr_multipliers(step2.lr_multipliers)
    _train_loop(model, data, config, report, "stl2", source_set, plan, plan.lam * plan.step2_lambda_factor)
    return _finish(model, data, report)


def stl_step2_config(plan: AdaptationPlan, config: TrainConfig, depth: int) -> tuple[AdaptationPlan, TrainConfig]:
    """The ITL plan/config pair that STL step 2 is equivalent to. The head
    keeps its configured rate; every body layer runs at
    ``step2_body_lr_multiplier`` times that rate."""
    head = config.lr_multipliers[-1] if config.lr_multipliers is not None else 1.0
    body = head * plan.step2_body_lr_multiplier
    return (
        replace(plan, lam=plan.lam * plan.step2_lambda_factor),
        replace(config, lr_multipliers=tuple([body] * depth + [head])),
    )
