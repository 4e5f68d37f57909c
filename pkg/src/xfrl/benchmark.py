"""The pinned synthetic transfer benchmark.

One seed runs: pretraining on ``src5``; scratch vs frozen transfer at
``k = 2`` on a 50-sample target; transferability sweeps of ``N(mid3)`` and
``N(src5*mid3)`` at ``k = 3, 4``; fine-tuning, ITL and STL on ``tgt3``.
Configs here are part of the benchmark definition and are versioned with
:data:`xfrl.datasets.BENCHMARK_VERSION`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import datasets as D
from .networks import HeadSpec, NetworkModel
from .protocols import (
    AdaptationPlan,
    TrainConfig,
    evaluate,
    finetune_train,
    itl_train,
    stl_train,
    train_scratch,
    transfer_freeze_train,
    transferability_sweep,
)

ARCH = "AlexNet_Conv"
WIDTH = 0.125
PRETRAIN = TrainConfig(epochs=8, batch_size=32, base_lr=0.03)
# scratch training, frozen transfer and sweeps: one rate for every layer
UNIFORM = TrainConfig(epochs=20, batch_size=32, base_lr=0.03)
# fine-tuning family (fine-tune, ITL, STL): small body rates, large head rate
FINETUNE = TrainConfig(epochs=30, batch_size=32, base_lr=0.01, lr_multipliers=(0.1, 0.1, 0.1, 0.5, 1.0, 10.0))
PLAN = AdaptationPlan(offshelf_upto=4, adaptation_layers=(5,), step1_epochs=20, step1_lr_scale=1.0)
SMALL_TARGET = 50
SWEEP_KS = (3, 4)


@dataclass
class SeedResult:
    seed: int
    source_accuracy: float
    scratch_small: float
    freeze2_small: float
    sweep_direct: dict[int, float]  # relative accuracy of N(mid3) per k
    sweep_chain: dict[int, float]  # relative accuracy of N(src5*mid3) per k
    finetune: float
    itl: float
    stl: float
    mmd_before: float
    mmd_after: float
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def mmd_ratio(self) -> float:
        return self.mmd_after / self.mmd_before


def tasks(seed: int):
    return (
        D.make_task("src5", seed, role="source"),
        D.make_task("mid3", seed, role="source"),
        D.make_task("tgt3", seed),
    )


def pretrain(source: D.TaskData, seed: int) -> NetworkModel:
    model, _ = train_scratch(ARCH, HeadSpec("classification", source.num_classes), source, replace(PRETRAIN, seed=seed), WIDTH)
    return model


def run_seed(seed: int) -> SeedResult:
    clock = {}

    def timed(name, fn, *args, **kwargs):
        t = time.perf_counter()
        out = fn(*args, **kwargs)
        clock[name] = time.perf_counter() - t
        return out

    src, mid, tgt = tasks(seed)
    uniform, fine = replace(UNIFORM, seed=seed), replace(FINETUNE, seed=seed)
    source = timed("pretrain", pretrain, src, seed)
    source_acc = evaluate(source, src.test)

    small = D.TaskData(tgt.train.subset(np.arange(SMALL_TARGET)), tgt.test)
    _, scratch_small = timed("scratch_small", train_scratch, ARCH, HeadSpec("classification", 3), small, uniform, WIDTH)
    _, freeze_small = timed("freeze2_small", transfer_freeze_train, source, 2, small, uniform)

    mid_head = HeadSpec("classification", mid.num_classes)
    direct, _ = timed("mid_scratch", train_scratch, ARCH, mid_head, mid, uniform, WIDTH)
    chain, _ = timed("mid_chain", finetune_train, source, mid, fine)  # N(src5*mid3)
    _, base = timed("tgt_scratch", train_scratch, ARCH, HeadSpec("classification", 3), tgt, uniform, WIDTH)
    sweep_direct = timed("sweep_direct", transferability_sweep, direct, tgt, uniform, SWEEP_KS, base.final_accuracy)
    sweep_chain = timed("sweep_chain", transferability_sweep, chain, tgt, uniform, SWEEP_KS, base.final_accuracy)

    _, ft = timed("finetune", finetune_train, source, tgt, fine)
    _, itl = timed("itl", itl_train, source, src.train, tgt, PLAN, fine)
    unlabeled = D.standardize(D.gen_synthetic(D.PRESETS["tgt3"], seed, "unlabeled")).images
    _, stl = timed("stl", stl_train, source, src.train, tgt, PLAN, fine, unlabeled=unlabeled)

    layer = PLAN.adaptation_layers[0]
    return SeedResult(
        seed=seed,
        source_accuracy=source_acc,
        scratch_small=scratch_small.final_accuracy,
        freeze2_small=freeze_small.final_accuracy,
        sweep_direct={k: sweep_direct.relative(k) for k in SWEEP_KS},
        sweep_chain={k: sweep_chain.relative(k) for k in SWEEP_KS},
        finetune=ft.final_accuracy,
        itl=itl.final_accuracy,
        stl=stl.final_accuracy,
        mmd_before=stl.diagnostics["step1_mmd_before"][layer],
        mmd_after=stl.diagnostics["step1_mmd_after"][layer],
        seconds=clock,
    )


def margins(results: list[SeedResult]) -> dict[str, float]:
    """Seed-mean margins; each ordering holds when its margin is >= 0
    (strictly > 0 for the 'beats' comparisons)."""

    def mean(f):
        # accuracies are multiples of 1/346; rounding removes float noise
        # so that exact ties in correct counts compare as exactly zero
        return round(math.fsum(f(r) for r in results) / len(results), 12)

    out = {
        "freeze2_minus_scratch": mean(lambda r: r.freeze2_small - r.scratch_small),
        "itl_minus_finetune": mean(lambda r: r.itl - r.finetune),
        "stl_minus_finetune": mean(lambda r: r.stl - r.finetune),
    }
    for k in SWEEP_KS:
        out[f"chain_minus_direct_k{k}"] = mean(lambda r: r.sweep_chain[k] - r.sweep_direct[k])
    return out
