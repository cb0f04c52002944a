"""Open-loop monoculture experiments and least-squares fitting of mu1*, mu2*, tau."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .plant import ControlInput, PlantParams, PlantState, measure, step
from .streams import make_rng
from .trace import ScenarioTrace, wire

MU_BOUNDS = (0.001, 0.1)
TAU_BOUNDS = (0.05, 1.0)


class UnidentifiableWarning(UserWarning):
    pass


@dataclass
class FitResult:
    mu1_star: float
    mu2_star: float
    tau: float
    rmse: list
    tau_identifiable: bool
    cost: float


def random_schedule(n_segments: int, seed: int, d_max: float = 0.02) -> list[float]:
    """Pump commands for consecutive segments, uniform in [0, d_max]."""
    rng = make_rng(seed, "sysid/schedule")
    return [float(v) for v in rng.uniform(0.0, d_max, n_segments)]


def generate_openloop_trace(p: PlantParams, schedule, duration: float, seed: int, strain: int = 1,
                            x0: float = 0.1, threshold: float = 1.0, segment: float = 30.0,
                            dt: float = 1.0, model: str = "simplified") -> ScenarioTrace:
    """Monoculture of ``strain`` grown undiluted until the measurement reaches
    ``threshold``, then diluted with ``schedule[i]`` during the i-th ``segment``
    minutes (the last value is held if the schedule runs out)."""
    if strain not in (1, 2):
        raise ValueError("strain must be 1 or 2")
    if not len(schedule):
        raise ValueError("empty dilution schedule")
    rng = make_rng(seed, "sysid/measurement")
    state = PlantState(x0 if strain == 1 else 0.0, x0 if strain == 2 else 0.0, p.s_in, 0.0, p.s_in)
    n = int(round(duration / dt)) + 1
    rows = []
    t_on = None
    for k in range(n):
        t = k * dt
        y = measure(state, p, rng, t)
        y1 = wire(y.y1)
        if t_on is None and y1 >= threshold:
            t_on = t
        d = 0.0
        if t_on is not None:
            i = min(int((t - t_on) // segment), len(schedule) - 1)
            d = float(schedule[i])
        rows.append(dict(t=t, x1=state.x1, x2=state.x2, s1=state.s1, x2r=0.0, s2=state.s2,
                         y1=y1, y2=0.0, x1_hat=0.0, x2_hat=0.0, d1=d, d2=0.0, dr=0.0,
                         r_d=0.0, od_d=0.0, x2r_d=0.0))
        if k < n - 1:
            state = step(state, ControlInput(d, 0.0, 0.0), p, dt, model)
    return ScenarioTrace.from_rows(rows, {"strain": strain, "seed": seed, "model": model})


def _profile(y, d, dt, mu, tau):
    """Best-fit initial density and model prediction for x' = (mu - d/tau) x."""
    rates = (mu - d[:-1] / tau) * dt
    g = np.exp(np.concatenate([[0.0], np.cumsum(rates)]))
    x0 = max(float(np.dot(y, g) / np.dot(g, g)), 0.0)
    return x0 * g


def _strain(tr: ScenarioTrace) -> int:
    s = tr.meta.get("strain")
    if s not in (None, ""):
        return int(s)
    return 1 if np.any(tr["x1"] > 0) else 2


def fit_growth_params(traces, starts: int = 5, seed: int = 0) -> FitResult:
    """Multi-start Nelder-Mead on the summed squared prediction error of all traces.

    Strain 1 traces constrain mu1*, strain 2 traces mu2*; tau is shared. The
    initial density of each trace is profiled out in closed form.
    """
    traces = list(traces)
    strains = [_strain(tr) for tr in traces]
    if 1 not in strains or 2 not in strains:
        raise ValueError("need at least one monoculture trace per strain")
    data = []
    for tr, s in zip(traces, strains):
        t = tr["t"]
        data.append((s, tr["y1"], tr["d1"], float(t[1] - t[0]) if len(t) > 1 else 1.0))
    identifiable = any(np.any(d[:-1] > 0) for _, _, d, _ in data)
    if not identifiable:
        warnings.warn("all dilution segments are zero: tau is unidentifiable",
                      UnidentifiableWarning, stacklevel=2)

    lo = np.array([MU_BOUNDS[0], MU_BOUNDS[0], TAU_BOUNDS[0]])
    hi = np.array([MU_BOUNDS[1], MU_BOUNDS[1], TAU_BOUNDS[1]])

    def unpack(z):
        # logistic map keeps the search inside the box
        return lo + (hi - lo) / (1.0 + np.exp(-z))

    def cost(z):
        mu1, mu2, tau = unpack(z)
        total = 0.0
        for s, y, d, dt in data:
            pred = _profile(y, d, dt, mu1 if s == 1 else mu2, tau)
            total += float(np.sum((pred - y) ** 2))
        return total if math.isfinite(total) else 1e300

    rng = make_rng(seed, "sysid/starts")
    best = None
    for i in range(starts):
        z0 = rng.normal(0.0, 1.5, 3)
        res = minimize(cost, z0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20_000, "maxfev": 40_000})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise RuntimeError("growth parameter fit failed")
    mu1, mu2, tau = (float(v) for v in unpack(best.x))
    rmse = []
    for s, y, d, dt in data:
        pred = _profile(y, d, dt, mu1 if s == 1 else mu2, tau)
        rmse.append(float(np.sqrt(np.mean((pred - y) ** 2))))
    return FitResult(mu1, mu2, tau, rmse, identifiable, float(best.fun))


def apply_fit(p: PlantParams, fit: FitResult) -> PlantParams:
    return replace(p, mu1_star=fit.mu1_star, mu2_star=fit.mu2_star, tau=fit.tau)
