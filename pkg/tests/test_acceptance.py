"""One test per acceptance criterion; each records a PASS/FAIL line that the
terminal summary prints at the end of the run."""
import time
from dataclasses import replace

import numpy as np

from xfrl import datasets as D
from xfrl import checkpoint as ckpt
from xfrl.benchmark import SWEEP_KS, margins
from xfrl.mmd import KernelBank, bank_for, mk_kernel, gaussian_kernel, mmd2_linear, mmd2_quadratic, mmd_grad
from xfrl.networks import HeadSpec, build, param_count
from xfrl.protocols import AdaptationPlan, TrainConfig, itl_train, stl_train, train_scratch, transfer_freeze_train, transferability_sweep
from xfrl.report import sweep_csv, train_log_csv
from xfrl.tensor_nn import (
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2,
    ReLU,
    Sequential,
    Upsample2,
    ZeroPad,
    grad_check,
    mse,
    softmax_xent,
)

from .oracles import brute_mmd2_u, brute_mmd2_v

ARCH, WIDTH = "AlexNet_Conv", 0.125


def _bank(rng):
    return KernelBank.from_base(float(rng.uniform(0.5, 4.0)), 5)


def test_criterion_1_quadratic_matches_brute_force(verdicts):
    t = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([1, i])
        s, u = rng.normal(size=(8, 4)), rng.normal(loc=0.5, size=(8, 4))
        bank = _bank(rng)
        worst = max(worst, abs(mmd2_quadratic(s, u, bank) - brute_mmd2_v(s, u, bank)))
    dt = time.perf_counter() - t
    verdicts.record(1, worst <= 1e-10 and dt < 5, f"max |diff| {worst:.2e} (tol 1e-10), {dt:.2f}s (< 5s)")


def test_criterion_2_linear_estimator_unbiased(verdicts):
    t = time.perf_counter()
    worst = 0.0  # |mean - U| in units of the standard error
    for i in range(20):
        rng = np.random.default_rng([2, i])
        s, u = rng.normal(size=(32, 4)), rng.normal(loc=0.3, size=(32, 4))
        bank = bank_for(s, u)
        vals = [mmd2_linear(s[rng.permutation(32)], u[rng.permutation(32)], bank) for _ in range(200)]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        worst = max(worst, abs(np.mean(vals) - brute_mmd2_u(s, u, bank)) / se)
    dt = time.perf_counter() - t
    verdicts.record(2, worst <= 3 and dt < 30, f"worst deviation {worst:.2f} SE (<= 3), {dt:.2f}s (< 30s)")


def test_criterion_3_mmd_properties(verdicts):
    t = time.perf_counter()
    asym = self_max = 0.0
    neg_min = np.inf
    convex_ok = True
    for i in range(1000):
        rng = np.random.default_rng([3, i])
        m, n, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
        a, b = rng.normal(size=(m, d)), rng.normal(scale=rng.uniform(0.1, 3), size=(n, d))
        bank = KernelBank.from_base(float(rng.uniform(0.1, 10)), 5)
        ab, ba = mmd2_quadratic(a, b, bank), mmd2_quadratic(b, a, bank)
        asym = max(asym, abs(ab - ba))
        self_max = max(self_max, mmd2_quadratic(a, a, bank))
        neg_min = min(neg_min, ab)
        x, y = a[0], b[0]
        basis = [gaussian_kernel(x, y, g) for g in bank.gammas]
        k = mk_kernel(x, y, bank)
        convex_ok &= min(basis) - 1e-15 <= k <= max(basis) + 1e-15
    dt = time.perf_counter() - t
    ok = asym == 0.0 and self_max <= 1e-12 and neg_min >= -1e-12 and convex_ok and dt < 10
    verdicts.record(
        3, ok, f"asymmetry {asym:.1e}, max self-MMD {self_max:.1e}, min {neg_min:.2e}, convex {convex_ok}, {dt:.2f}s (< 10s)"
    )


def _layer_errors(layer, x_shape, rng):
    """Max relative FD error of input and parameter gradients for one point."""
    x = rng.normal(size=x_shape)
    r = rng.normal(size=layer.forward(x).shape)

    def f_input(v):
        out = layer.forward(v)
        return float(np.sum(out * r)), layer.backward(r)

    errors = [grad_check(f_input, x)]
    for p in layer.params():

        def f_param(v, p=p):
            p.value = v.copy()
            p.zero_grad()
            out = layer.forward(x)
            layer.backward(r)
            return float(np.sum(out * r)), p.grad.copy()

        errors.append(grad_check(f_param, p.value.copy()))
    return max(errors)


def test_criterion_4_gradient_suite(verdicts):
    t = time.perf_counter()
    results = {}
    for point in range(10):
        rng = np.random.default_rng([4, point])
        layers = {
            "Conv2D": (Conv2D(2, 3, 3, rng), (2, 2, 6, 6)),
            "Conv2D/stride2": (Conv2D(1, 2, 3, rng, stride=2), (1, 1, 7, 7)),
            "ReLU": (ReLU(), (2, 3, 4, 4)),
            "MaxPool2": (MaxPool2(), (2, 2, 4, 6)),
            "Upsample2": (Upsample2(), (1, 2, 3, 3)),
            "ZeroPad": (ZeroPad(2), (1, 2, 3, 3)),
            "GlobalAvgPool": (GlobalAvgPool(), (2, 3, 4, 4)),
            "Dense": (Dense(5, 3, rng), (4, 5)),
            "Sequential": (Sequential([Conv2D(1, 2, 3, rng), ReLU(), MaxPool2(), GlobalAvgPool(), Dense(2, 3, rng)]), (2, 1, 6, 6)),
        }
        for name, (layer, shape) in layers.items():
            results[name] = max(results.get(name, 0.0), _layer_errors(layer, shape, rng))

        logits, labels = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
        results["softmax_xent"] = max(results.get("softmax_xent", 0.0), grad_check(lambda v: softmax_xent(v, labels), logits))
        target = rng.normal(size=(3, 4))
        results["mse"] = max(results.get("mse", 0.0), grad_check(lambda v: mse(v, target), rng.normal(size=(3, 4))))

        s, u = rng.normal(size=(6, 3)), rng.normal(loc=0.3, size=(6, 3))
        bank = bank_for(s, u)
        for est in ("quadratic", "linear"):
            e_src = grad_check(lambda v: mmd_grad(v, u, bank, est)[:2], s)
            e_tgt = grad_check(lambda v: (lambda o: (o[0], o[2]))(mmd_grad(s, v, bank, est)), u)
            results[f"mmd_grad/{est}"] = max(results.get(f"mmd_grad/{est}", 0.0), e_src, e_tgt)
    dt = time.perf_counter() - t
    worst = max(results, key=results.get)
    ok = max(results.values()) < 1e-4 and dt < 30
    verdicts.record(4, ok, f"{len(results)} components x 10 points, worst {worst} {results[worst]:.1e} (< 1e-4), {dt:.1f}s (< 30s)")


def _small_target(seed=0, n=60):
    data = D.make_task("tgt3", seed)
    return D.TaskData(data.train.subset(np.arange(n)), data.test)


def test_criterion_5_freeze_semantics(verdicts):
    t = time.perf_counter()
    src = D.make_task("src5", 0, role="source")
    src = D.TaskData(src.train.subset(np.arange(200)), src.test.subset(np.arange(50)))
    source, _ = train_scratch(ARCH, HeadSpec("classification", 5), src, TrainConfig(epochs=1, base_lr=0.03), WIDTH)
    target = _small_target()
    cfg = TrainConfig(epochs=5, base_lr=0.03, seed=7)

    model, _ = transfer_freeze_train(source, 2, target, cfg)
    frozen_ok = all(
        p.value.tobytes() == q.value.tobytes() for l in (1, 2) for p, q in zip(source.block_params(l), model.block_params(l))
    )
    a, ra = transfer_freeze_train(source, 0, target, cfg)
    b, rb = train_scratch(ARCH, HeadSpec("classification", 3), target, cfg, WIDTH)
    same = all(p.value.tobytes() == q.value.tobytes() for p, q in zip(a.params(), b.params())) and ra.epochs == rb.epochs
    dt = time.perf_counter() - t
    verdicts.record(5, frozen_ok and same and dt < 120, f"k=2 layers 1-2 bit-identical {frozen_ok}, k=0 == scratch {same}, {dt:.1f}s (< 120s)")


def test_criterion_6_loss_bookkeeping(verdicts):
    src = D.make_task("src5", 0, role="source")
    source, _ = train_scratch(ARCH, HeadSpec("classification", 5), D.TaskData(src.train.subset(np.arange(100)), src.test), TrainConfig(epochs=1, base_lr=0.03), WIDTH)
    target = _small_target(n=64)
    plan = AdaptationPlan(offshelf_upto=3, adaptation_layers=(4, 5), alphas=(0.5, 1.0), step1_epochs=1)
    cfg = TrainConfig(epochs=4, base_lr=0.01, seed=1)
    _, ritl = itl_train(source, src.train, target, plan, cfg)
    _, rstl = stl_train(source, src.train, target, plan, cfg)
    worst, decay_ok, n = 0.0, True, 0
    for report, phase in ((ritl, "itl"), (rstl, "stl2")):
        steps = [s for s in report.steps if s.phase == phase]
        for s in steps:
            recomputed = s.loss_cls + s.lam * sum(plan.alpha_map[l] * v for l, v in s.mmd.items())
            worst = max(worst, abs(s.loss_total - recomputed))
            n += 1
        lams = [s.lam for s in steps]
        changes = [(x, y) for x, y in zip(lams, lams[1:]) if x != y]
        decay_ok &= len(changes) == 1 and changes[0][1] == changes[0][0] * plan.lambda_decay_factor
    verdicts.record(6, worst <= 1e-9 and decay_ok, f"{n} steps, max |total - recomputed| {worst:.1e} (<= 1e-9), single x0.1 decay {decay_ok}")


def test_criterion_7_stl_step1_reduces_mmd(verdicts, benchmark_results):
    results, _ = benchmark_results
    ratios = [r.mmd_ratio for r in results]
    seconds = sum(r.seconds["pretrain"] + r.seconds["stl"] for r in results)
    ok = all(x <= 0.5 for x in ratios) and seconds < 300
    verdicts.record(7, ok, f"layer-5 MMD after/before per seed {[round(x, 3) for x in ratios]} (<= 0.5 each), {seconds:.0f}s (< 300s)")


def test_criterion_8_qualitative_orderings(verdicts, benchmark_results):
    results, seconds = benchmark_results
    m = margins(results)
    a = m["freeze2_minus_scratch"] > 0
    b = all(m[f"chain_minus_direct_k{k}"] > 0 for k in SWEEP_KS)
    c = m["itl_minus_finetune"] >= 0 and m["stl_minus_finetune"] >= 0
    detail = ", ".join(f"{k} {v:+.4f}" for k, v in m.items())
    verdicts.record(8, a and b and c and seconds < 1200, f"(a) {a} (b) {b} (c) {c}: {detail}; {seconds:.0f}s (< 1200s)")


def test_criterion_9_determinism_and_persistence(verdicts, tmp_path):
    t = time.perf_counter()
    target = _small_target(n=48)
    cfg = TrainConfig(epochs=2, base_lr=0.03, seed=3)
    source, _ = train_scratch(ARCH, HeadSpec("classification", 3), target, cfg, WIDTH)
    runs = [transferability_sweep(source, target, cfg) for _ in range(2)]
    csv_same = sweep_csv(runs[0]) == sweep_csv(runs[1])
    logs = [train_scratch(ARCH, HeadSpec("classification", 3), target, cfg, WIDTH)[1] for _ in range(2)]
    csv_same &= train_log_csv(logs[0]) == train_log_csv(logs[1])

    path = tmp_path / "m.xfrl"
    ckpt.save_checkpoint(source, path)
    back = ckpt.load_checkpoint(path)
    x = np.random.default_rng(0).normal(size=(10, 1, 32, 32))
    round_trip = source.forward(x)[0].tobytes() == back.forward(x)[0].tobytes()

    blob = path.read_bytes()
    rng = np.random.default_rng(9)
    detected = 0
    positions = rng.integers(0, len(blob), 300)
    for pos in positions:
        bad = bytearray(blob)
        bad[pos] ^= int(rng.integers(1, 256))
        try:
            ckpt.decode(bytes(bad))
        except ckpt.CheckpointError:
            detected += 1
    dt = time.perf_counter() - t
    ok = csv_same and round_trip and detected == len(positions) and dt < 120
    verdicts.record(9, ok, f"CSV byte-stable {csv_same}, round-trip bit-exact {round_trip}, corruption caught {detected}/{len(positions)}, {dt:.1f}s (< 120s)")


TABLE = {
    "A_ConvNet": [(16, 5), (32, 5), (64, 5), (128, 6)],
    "H_Net": [(48, 5), (96, 5), (128, 3), (128, 3), (256, 3)],
    "AlexNet_Conv": [(96, 11), (256, 5), (384, 3), (384, 3), (256, 3)],
}


def test_criterion_10_architecture_conformance(verdicts):
    seqs = {arch: build(arch, HeadSpec("classification", 3), (1, 64, 64), 0).conv_config() for arch in TABLE}
    seq_ok = seqs == TABLE
    model = build("A_ConvNet", HeadSpec("classification", 3), (1, 64, 64), 0)
    conv = param_count([p for l in range(1, model.depth + 1) for p in model.block_params(l)])
    verdicts.record(10, seq_ok and conv == 361_392, f"channel/kernel sequences match {seq_ok}; A_ConvNet conv param_count {conv} (expected 361,392)")
