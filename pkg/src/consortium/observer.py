"""Extended Kalman filter reconstructing (x1, x2) from total biomass y1 = x1 + x2."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .plant import ControlInput, PlantParams, mixing_exact_step
from .streams import make_rng

H = np.array([[1.0, 1.0]])


class FilterError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    q: float = 1e-5
    r: float = 5.0
    p0: float = 0.072

    def __post_init__(self):
        if not (self.q > 0 and self.r > 0 and self.p0 > 0):
            raise ValueError("q, r and p0 must be positive")


@dataclass(frozen=True)
class EkfEstimate:
    x1_hat: float
    x2_hat: float
    p: np.ndarray = field(repr=False)
    t: float = 0.0


def initial_estimate(y1: float, cfg: EkfConfig = EkfConfig(), ratio: float | None = None,
                     t: float = 0.0) -> EkfEstimate:
    """Split the first measurement 50/50, or by a known ratio x2/x1."""
    y1 = max(y1, 0.0)
    if ratio is None:
        x1 = x2 = y1 / 2.0
    else:
        x1 = y1 / (1.0 + ratio)
        x2 = y1 - x1
    return EkfEstimate(x1, x2, cfg.p0 * np.eye(2), t)


def observability_matrix(mu1_star: float, mu2_star: float, d1_eff: float, d2_eff: float) -> np.ndarray:
    d = d1_eff + d2_eff
    return np.array([[1.0, 1.0], [mu1_star - d, mu2_star - d]])


def ekf_step(est: EkfEstimate, u: ControlInput, y1: float, p: PlantParams, cfg: EkfConfig,
             dt: float = 1.0, *, x2r: float) -> EkfEstimate:
    """One predict/update cycle. ``u`` is the input held over the last ``dt``
    minutes; ``x2r`` is the reservoir density assumed for the D2 inflow term."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    d1, d2 = u.d1 / p.tau, u.d2 / p.tau
    a1 = p.mu1_star - (d1 + d2)
    a2 = p.mu2_star - (d1 + d2)
    # mean: exact solution for the held input; covariance: Euler-discretized Jacobian
    x1, x2 = mixing_exact_step(est.x1_hat, est.x2_hat, u, p, dt, x2r)

    F = np.eye(2) + np.diag([a1, a2]) * dt
    P = F @ est.p @ F.T + cfg.q * np.eye(2) * dt

    s = float((H @ P @ H.T)[0, 0]) + cfg.r
    if not s > 0:
        raise FilterError(f"innovation covariance {s} is not positive")
    K = (P @ H.T) / s
    innov = y1 - (x1 + x2)
    x1 += K[0, 0] * innov
    x2 += K[1, 0] * innov
    IKH = np.eye(2) - K @ H
    P = IKH @ P @ IKH.T + cfg.r * (K @ K.T)
    P = 0.5 * (P + P.T)
    return EkfEstimate(max(x1, 0.0), max(x2, 0.0), P, est.t + dt)


def run_filter(trace, p: PlantParams, cfg: EkfConfig) -> np.ndarray:
    """Replay a trace's recorded inputs and y1 through the filter; returns (n, 2) estimates.

    Initialization uses the ``ekf_init_ratio`` metadata entry when present.
    """
    ratio = trace.meta.get("ekf_init_ratio")
    ratio = float(ratio) if ratio not in (None, "", "none") else None
    t, y1 = trace["t"], trace["y1"]
    d1, d2, x2r_d = trace["d1"], trace["d2"], trace["x2r_d"]
    out = np.empty((len(t), 2))
    est = initial_estimate(y1[0], cfg, ratio, t[0])
    out[0] = est.x1_hat, est.x2_hat
    for k in range(1, len(t)):
        est = ekf_step(est, ControlInput(d1[k - 1], d2[k - 1]), y1[k], p, cfg,
                       t[k] - t[k - 1], x2r=x2r_d[k - 1])
        out[k] = est.x1_hat, est.x2_hat
    return out


def estimation_mse(traces, p: PlantParams, cfg: EkfConfig) -> float:
    errs = []
    for tr in traces:
        est = run_filter(tr, p, cfg)
        errs.append((est[:, 0] - tr["x1"]) ** 2)
        errs.append((est[:, 1] - tr["x2"]) ** 2)
    return float(np.mean(np.concatenate(errs)))


def tune_ekf(training_traces, search_budget: int, p: PlantParams = PlantParams(),
             seed: int = 0, population: int = 20, mutation_sigma: float = 1.0,
             start: EkfConfig = EkfConfig()) -> EkfConfig:
    """Elitist genetic search over log(q, r, p0) minimizing mean squared estimation error.

    Every evaluation counts against ``search_budget``; the starting config is
    evaluated first, so the result is never worse than it on the training traces.
    """
    traces = list(training_traces)
    if not traces:
        raise ValueError("tune_ekf needs at least one training trace")
    if search_budget <= 0:
        return start
    rng = make_rng(seed, "tune_ekf")

    def fitness(g):
        try:
            return estimation_mse(traces, p, EkfConfig(*np.exp(g)))
        except (FilterError, ValueError):
            return math.inf

    best_g = np.log([start.q, start.r, start.p0])
    best_f = fitness(best_g)
    used = 1
    pop = [best_g] + [best_g + rng.normal(0, mutation_sigma * 2, 3) for _ in range(population - 1)]
    scores = [best_f]
    for g in pop[1:]:
        if used >= search_budget:
            break
        scores.append(fitness(g))
        used += 1
    pop = pop[: len(scores)]
    while used < search_budget:
        order = np.argsort(scores)
        elite = [pop[i] for i in order[: max(2, population // 4)]]
        children = [pop[order[0]]]
        child_scores = [scores[order[0]]]
        while len(children) < population and used < search_budget:
            a, b = rng.choice(len(elite), 2)
            mix = rng.random(3) < 0.5
            g = np.where(mix, elite[a], elite[b]) + rng.normal(0, mutation_sigma, 3)
            children.append(g)
            child_scores.append(fitness(g))
            used += 1
        pop, scores = children, child_scores
    i = int(np.argmin(scores))
    if scores[i] < best_f:
        best_g, best_f = pop[i], scores[i]
    return EkfConfig(*(float(v) for v in np.exp(best_g)))
