"""Genetic search over the EKF covariances on simulated co-cultures, scored on held-out seeds."""

import argparse

import numpy as np

from consortium.harness import coculture_estimation_trace
from consortium.observer import EkfConfig, estimation_mse, tune_ekf
from consortium.plant import PlantParams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budget", type=int, default=200, help="fitness evaluations")
    ap.add_argument("--train-seeds", type=int, default=3)
    ap.add_argument("--test-seeds", type=int, default=3)
    ap.add_argument("--unknown-ratio", action="store_true",
                    help="start each filter from a 50/50 split instead of the true ratio")
    args = ap.parse_args()

    p = PlantParams()
    ratio = None if args.unknown_ratio else 1.0
    train = [coculture_estimation_trace(s, init_ratio=ratio) for s in range(args.train_seeds)]
    test = [coculture_estimation_trace(s, init_ratio=ratio)
            for s in range(100, 100 + args.test_seeds)]
    tuned = tune_ekf(train, args.budget, p)
    for name, cfg in (("default", EkfConfig()), ("tuned", tuned)):
        print(f"{name:8s} q={cfg.q:.3g} r={cfg.r:.3g} p0={cfg.p0:.3g}  "
              f"train MSE {estimation_mse(train, p, cfg):.3e}  "
              f"test MSE {estimation_mse(test, p, cfg):.3e}")
    gain = estimation_mse(test, p, EkfConfig()) / estimation_mse(test, p, tuned)
    print(f"held-out MSE ratio default/tuned: {gain:.2f} ({np.log10(gain):+.2f} decades)")


if __name__ == "__main__":
    main()
