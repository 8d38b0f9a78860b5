#!/usr/bin/env python3
"""Run the synthetic ablation benchmark: every variant across several seeds.

Writes one JSON document with per-run metrics and prints a summary table
comparing each variant's average test MAE against the full model.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from testam.benchmark import ABLATION_VARIANTS, run_benchmark_variant


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="ablation_results.json")
    parser.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS))
    args = parser.parse_args(argv)

    runs = []
    for seed in args.seeds:
        for variant in args.variants:
            t0 = time.time()
            result = run_benchmark_variant(variant, data_seed=seed, train_seed=seed)
            result["seconds"] = round(time.time() - t0, 1)
            runs.append(result)
            print(
                f"seed {seed} {variant:18s} test MAE {result['test_mae']:.4f} "
                f"({result['seconds']}s)",
                flush=True,
            )
    Path(args.out).write_text(json.dumps(runs, indent=2))

    by_variant = {}
    for run in runs:
        by_variant.setdefault(run["variant"], []).append(run["test_mae"])
    print("\nvariant              mean MAE   per-seed")
    for variant, maes in by_variant.items():
        per_seed = " ".join(f"{m:.3f}" for m in maes)
        print(f"{variant:18s} {sum(maes) / len(maes):9.4f}   {per_seed}")
    if "full" in by_variant:
        full = by_variant["full"]
        for variant, maes in by_variant.items():
            if variant == "full":
                continue
            wins = sum(f <= m for f, m in zip(full, maes))
            print(f"full <= {variant:18s} in {wins}/{len(maes)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
