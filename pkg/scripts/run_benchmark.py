"""Run the pinned benchmark and print per-seed results plus seed-mean margins.

    python scripts/run_benchmark.py [--seeds 0 1 2 3 4] [--out results/]
"""
import argparse
import csv
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from xfrl.benchmark import SWEEP_KS, margins, run_seed

COLUMNS = ["seed", "source_accuracy", "scratch_small", "freeze2_small", "finetune", "itl", "stl", "mmd_ratio"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    results = []
    with threadpool_limits(limits=1):
        for seed in args.seeds:
            r = run_seed(seed)
            results.append(r)
            sweeps = " ".join(f"k{k}: {r.sweep_direct[k]:+.3f}/{r.sweep_chain[k]:+.3f}" for k in SWEEP_KS)
            print(
                f"seed {seed}: src {r.source_accuracy:.3f} | scratch50 {r.scratch_small:.3f} freeze2 {r.freeze2_small:.3f}"
                f" | direct/chain {sweeps} | ft {r.finetune:.4f} itl {r.itl:.4f} stl {r.stl:.4f}"
                f" | mmd ratio {r.mmd_ratio:.3f} | {sum(r.seconds.values()):.0f}s",
                flush=True,
            )
    for name, value in margins(results).items():
        print(f"{name:>24}: {value:+.4f}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "benchmark.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(COLUMNS + [f"direct_k{k}" for k in SWEEP_KS] + [f"chain_k{k}" for k in SWEEP_KS])
            for r in results:
                row = asdict(r) | {"mmd_ratio": r.mmd_ratio}
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in COLUMNS]
                           + [repr(r.sweep_direct[k]) for k in SWEEP_KS] + [repr(r.sweep_chain[k]) for k in SWEEP_KS])


if __name__ == "__main__":
    main()
