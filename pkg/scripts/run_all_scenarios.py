"""Run every builtin scenario under every controller pairing and tabulate replicate statistics.

Writes one CSV per replicate under --out and prints mean +- std (n) of the
settling time and NRMSE per signal and segment, plus paired t-test p-values
between controllers sharing a scenario.
"""

import argparse
import itertools
from pathlib import Path

from consortium.harness import builtin_scenarios, replicate_stats, run_scenario, with_controllers


def pairings(s):
    mixers = ["none"] if s.mixing == "none" else ["switching", "dqn"]
    return list(itertools.product(mixers, ["pi", "mpc", "dqn"]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--metric", choices=("settling", "nrmse"), default="nrmse")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    for s in builtin_scenarios():
        groups = {}
        for mixing, reservoir in pairings(s):
            variant = with_controllers(s, mixing, reservoir)
            traces = run_scenario(variant)
            for tr in traces:
                tr.to_csv(args.out / f"{s.name}_{mixing}_{reservoir}_seed{tr.meta['seed']}.csv")
            groups[f"{mixing}/{reservoir}"] = traces
        stats = replicate_stats(groups, args.metric)
        print(f"== {s.name} ({args.metric})")
        for variant, rows in stats["summary"].items():
            for (signal, seg), (mean, std, n, excluded) in sorted(rows.items()):
                note = f" [{excluded} never settled]" if excluded else ""
                print(f"  {variant:16s} {signal:9s} seg {seg}: {mean:.4f} +- {std:.4f} (n={n}){note}")
        for (key, a, b), p in sorted(stats["pvalues"].items()):
            if p < 0.05:
                print(f"  p={p:.3f} {a} vs {b} on {key[0]} seg {key[1]}")


if __name__ == "__main__":
    main()
