"""Train the packaged mixing and reservoir policies and report how they score.

The weights land in src/consortium/data/, where ``harness.load_policy`` finds
them. ``--sweep`` instead trains several seeds per environment and prints the
scenario metrics of each, which is how the per-environment defaults in
``rl.ENV_DEFAULTS`` were chosen.
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from consortium.harness import evaluate_trace, get_scenario, run_scenario
from consortium.rl import default_train_config, train_dqn

DATA = Path(__file__).resolve().parents[1] / "src" / "consortium" / "data"


def score(env, net):
    if env == "mixing":
        ev = [evaluate_trace(tr) for tr in
              run_scenario(replace(get_scenario("regulation"), mixing="dqn"), nets={env: net})]
        return {"od_nrmse": max(e[("od", 0)]["nrmse"] for e in ev),
                "ratio_nrmse": max(e[("ratio", 0)]["nrmse"] for e in ev),
                "ratio_settling": max(e[("ratio", 0)]["settling"] for e in ev)}
    ev = [evaluate_trace(tr) for tr in
          run_scenario(replace(get_scenario("reservoir-stepdown"), reservoir="dqn"),
                       nets={env: net})]
    return {f"nrmse_{i}": max(e[("x2r", i)]["nrmse"] for e in ev) for i in range(3)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--envs", nargs="+", default=["mixing", "reservoir"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sweep", type=int, metavar="N", help="train seeds 0..N-1 without saving")
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    for env in args.envs:
        seeds = range(args.sweep) if args.sweep else [args.seed]
        for seed in seeds:
            t0 = time.perf_counter()
            net, log = train_dqn(env, default_train_config(env), seed)
            metrics = ", ".join(f"{k}={v:.3f}" for k, v in score(env, net).items())
            logging.info("%s seed %d: %.0f s, best checkpoint at episode %s, %s",
                         env, seed, time.perf_counter() - t0, log.best_episode, metrics)
            if not args.sweep:
                args.out.mkdir(parents=True, exist_ok=True)
                net.save(args.out / f"{env}_qnet.txt")


if __name__ == "__main__":
    main()
