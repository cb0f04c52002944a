"""Scenarios, closed-loop orchestration and replicate statistics.

One sample per minute: measure -> EKF update -> mixing controller -> recovery
gate -> reservoir controller and compensation -> plant step. The plant and
controller sides are separate objects that only exchange measurements and
pump commands, so they can run either in-process ("coupled") or as two
threads talking through per-step CSV files ("exchange").
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics
from .control import (
    DqnMixingController, DqnReservoir, MpcReservoir, PiReservoir, Reference,
    ReferenceSchedule, SwitchingController, SwitchingGains, compensate_reservoir,
    recovery_gate,
)
from .observer import EkfConfig, ekf_step, initial_estimate
from .plant import (
    ControlInput, PlantParams, PlantState, apply_bolus, measure, mixing_exact_step, step,
)
from .rl import QNetwork
from .streams import make_rng
from .trace import ScenarioTrace, fmt, wire

MIXING_X2R_D = 0.9
# half-scale switching magnitudes: at 1-min zero-order hold the full 0.02
# commands overshoot by ~20% per sample; 0.01/tau still exceeds mu1_star twofold
LOOP_GAINS = SwitchingGains(0.01, 0.01, 0.01)


class ExchangeTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    kind: str  # "bolus" (value = dilution factor) or "growth" (value = mu2 scale)
    value: float


@dataclass(frozen=True)
class Scenario:
    name: str
    initial: PlantState
    schedule: ReferenceSchedule
    duration: float
    mixing: str = "switching"  # switching | dqn | none
    reservoir: str = "pi"  # pi | mpc | dqn
    events: tuple = ()
    seeds: tuple = (0, 1, 2)
    dt: float = 1.0
    facs_interval: float = 10.0
    params: PlantParams = PlantParams()
    ekf: EkfConfig = EkfConfig()
    model: str = "full"
    known_initial_ratio: bool = True
    gains: SwitchingGains = LOOP_GAINS

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("replicate seeds must be distinct")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")

    def config_hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def _state(x1, x2, x2r, p=PlantParams()):
    return PlantState(x1, x2, p.s_in, x2r, p.s_in)


def builtin_scenarios() -> list[Scenario]:
    sched = ReferenceSchedule.constant
    ref = lambda r, od=0.7: Reference(r, od, MIXING_X2R_D)  # noqa: E731
    return [
        Scenario("regulation", _state(0.4, 0.4, 0.8), sched(ref(0.6)), 180.0),
        Scenario("ratio-tracking", _state(0.35, 0.35, 0.8),
                 ReferenceSchedule([(0, ref(1.0)), (60, ref(0.6))]), 180.0),
        Scenario("od-tracking", _state(0.35, 0.35, 0.8),
                 ReferenceSchedule([(0, ref(1.0)), (60, ref(1.0, 0.55))]), 180.0),
        Scenario("robustness-bolus", _state(0.35, 0.35, 0.8), sched(ref(1.5)), 200.0,
                 events=(Event(100.0, "bolus", 0.87),)),
        Scenario("reservoir-stepdown", _state(0.0, 0.0, 0.8),
                 ReferenceSchedule([(0, Reference(1.0, 0.7, 0.8)), (30, Reference(1.0, 0.7, 0.65)),
                                    (60, Reference(1.0, 0.7, 0.5))]), 90.0, mixing="none"),
        Scenario("reservoir-temperature", _state(0.0, 0.0, 0.5),
                 sched(Reference(1.0, 0.7, 0.5)), 60.0, mixing="none",
                 events=(Event(30.0, "growth", 0.9),)),
    ]


def get_scenario(name: str) -> Scenario:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    raise KeyError(f"unknown scenario {name!r}")


def load_policy(env: str) -> QNetwork:
    """Packaged pretrained weights for 'mixing' or 'reservoir'."""
    path = resources.files("consortium") / "data" / f"{env}_qnet.txt"
    return QNetwork.load(path)


class PlantSide:
    def __init__(self, s: Scenario, seed: int):
        self.s = s
        self.p = s.params
        self.state = s.initial
        self.rng = make_rng(seed, "measurement")
        self.pending = sorted(s.events, key=lambda e: e.t)
        self.rows = []

    def sense(self, k: int) -> tuple[float, float, float]:
        t = k * self.s.dt
        while self.pending and self.pending[0].t <= t + 1e-9:
            ev = self.pending.pop(0)
            if ev.kind == "bolus":
                self.state = apply_bolus(self.state, self.p, ev.value)
            elif ev.kind == "growth":
                self.p = self.p.scaled(mu2=ev.value)
            else:
                raise ValueError(f"unknown event kind {ev.kind!r}")
        m = measure(self.state, self.p, self.rng, t)
        return t, wire(m.y1), wire(m.y2)

    def actuate(self, t, y1, y2, u: ControlInput, last: bool) -> None:
        st = self.state
        self.rows.append(dict(t=t, x1=st.x1, x2=st.x2, s1=st.s1, x2r=st.x2r, s2=st.s2,
                              y1=y1, y2=y2, d1=u.d1, d2=u.d2, dr=u.dr))
        if not last:
            self.state = step(st, u, self.p, self.s.dt, self.s.model)


class ControllerSide:
    def __init__(self, s: Scenario, nets: dict | None = None):
        self.s = s
        nets = nets or {}
        p = s.params
        if s.mixing == "switching":
            self.mixer = SwitchingController(s.gains)
        elif s.mixing == "dqn":
            self.mixer = DqnMixingController(nets.get("mixing") or load_policy("mixing"))
        elif s.mixing == "none":
            self.mixer = None
        else:
            raise ValueError(f"unknown mixing controller {s.mixing!r}")
        if s.reservoir == "pi":
            self.res = PiReservoir(dt=s.dt)
        elif s.reservoir == "mpc":
            self.res = MpcReservoir(p, dt=s.dt)
        elif s.reservoir == "dqn":
            self.res = DqnReservoir(nets.get("reservoir") or load_policy("reservoir"))
        else:
            raise ValueError(f"unknown reservoir controller {s.reservoir!r}")
        self.est = None
        self.u_prev = ControlInput()
        self.ref_prev = None
        self.gate_closed = False
        self.rows = []

    def act(self, t: float, y1: float, y2: float) -> ControlInput:
        s = self.s
        ref = s.schedule.at(t)
        d1 = d2 = 0.0
        x1h = x2h = 0.0
        if self.mixer is not None:
            if self.est is None:
                x0 = s.initial
                ratio = x0.x2 / x0.x1 if s.known_initial_ratio and x0.x1 > 0 else None
                self.est = initial_estimate(y1, s.ekf, ratio, t)
            else:
                self.est = ekf_step(self.est, self.u_prev, y1, s.params, s.ekf, s.dt,
                                    x2r=self.ref_prev.x2r_d)
            x1h, x2h = self.est.x1_hat, self.est.x2_hat
            u = self.mixer(x1h, x2h, ref)
            d1 = u.d1
            d2, self.gate_closed = recovery_gate(y2, u.d2, self.gate_closed)
        d_r2 = self.res(y2, ref.x2r_d)
        dr = compensate_reservoir(d_r2, d2)
        u = ControlInput(wire(d1), wire(d2), wire(dr))
        self.u_prev, self.ref_prev = u, ref
        self.rows.append(dict(x1_hat=x1h, x2_hat=x2h, r_d=ref.r_d, od_d=ref.od_d, x2r_d=ref.x2r_d))
        return u


def _n_samples(s: Scenario) -> int:
    return int(round(s.duration / s.dt)) + 1


def _assemble(s: Scenario, plant: PlantSide, ctrl: ControllerSide, seed: int, mode: str):
    rows = [{**a, **b} for a, b in zip(plant.rows, ctrl.rows)]
    meta = {
        "scenario": s.name, "seed": seed, "mixing": s.mixing, "reservoir": s.reservoir,
        "config_hash": s.config_hash(), "mode": mode,
        "ekf_init_ratio": (s.initial.x2 / s.initial.x1
                           if s.known_initial_ratio and s.initial.x1 > 0 else "none"),
        "facs_interval": s.facs_interval,
        "boundaries": ";".join(f"{a:g}" for a in segment_starts(s)),
    }
    return ScenarioTrace.from_rows(rows, meta)


def _run_coupled(s: Scenario, seed: int, nets) -> ScenarioTrace:
    plant, ctrl = PlantSide(s, seed), ControllerSide(s, nets)
    n = _n_samples(s)
    for k in range(n):
        t, y1, y2 = plant.sense(k)
        u = ctrl.act(t, y1, y2)
        plant.actuate(t, y1, y2, u, last=k == n - 1)
    return _assemble(s, plant, ctrl, seed, "coupled")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _await_file(path: Path, poll: float, budget: float, stop: threading.Event) -> list[str]:
    deadline = time.monotonic() + budget
    while True:
        if path.exists():
            text = path.read_text()
            if text.endswith("\n"):
                return text.strip().split(",")
        if stop.is_set():
            raise ExchangeTimeout("counterpart failed")
        if time.monotonic() > deadline:
            raise ExchangeTimeout(f"{path.name} not produced within {budget:g} s")
        time.sleep(poll)


def _run_exchange(s: Scenario, seed: int, nets, workdir: Path, poll: float, budget: float):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    plant, ctrl = PlantSide(s, seed), ControllerSide(s, nets)
    n = _n_samples(s)
    errors = []
    stop = threading.Event()

    def plant_loop():
        try:
            for k in range(n):
                t, y1, y2 = plant.sense(k)
                _write_atomic(workdir / f"meas_{k}.csv", f"{k},{fmt(t)},{fmt(y1)},{fmt(y2)}\n")
                _, d1, d2, dr = _await_file(workdir / f"act_{k}.csv", poll, budget, stop)
                plant.actuate(t, y1, y2, ControlInput(float(d1), float(d2), float(dr)),
                              last=k == n - 1)
        except Exception as e:  # surfaced after join
            errors.append(e)
            stop.set()

    def controller_loop():
        try:
            for k in range(n):
                _, t, y1, y2 = _await_file(workdir / f"meas_{k}.csv", poll, budget, stop)
                u = ctrl.act(float(t), float(y1), float(y2))
                _write_atomic(workdir / f"act_{k}.csv", f"{k},{fmt(u.d1)},{fmt(u.d2)},{fmt(u.dr)}\n")
        except Exception as e:
            errors.append(e)
            stop.set()

    threads = [threading.Thread(target=plant_loop), threading.Thread(target=controller_loop)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return _assemble(s, plant, ctrl, seed, "exchange")


def run_scenario(s: Scenario, mode: str = "coupled", seeds=None, nets: dict | None = None,
                 workdir=None, poll: float = 0.05, budget: float = 10.0) -> list[ScenarioTrace]:
    """Run every replicate of ``s``; one trace per seed.

    ``mode='exchange'`` needs ``workdir``; a fresh subdirectory per seed is used.
    """
    seeds = s.seeds if seeds is None else tuple(seeds)
    out = []
    for seed in seeds:
        if mode == "coupled":
            tr = _run_coupled(s, seed, nets)
        elif mode == "exchange":
            if workdir is None:
                raise ValueError("exchange mode needs a working directory")
            tr = _run_exchange(s, seed, nets, Path(workdir) / f"{s.name}_seed{seed}", poll, budget)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        out.append(tr)
    # exchange traces carry mode in metadata only; data columns are identical
    return out


def segment_starts(s: Scenario) -> list[float]:
    pts = {t for t, _ in s.schedule.segments} | {e.t for e in s.events}
    return sorted(t for t in pts if t < s.duration or t == 0)


def _segments(trace: ScenarioTrace):
    t = trace["t"]
    raw = trace.meta.get("boundaries", "0")
    starts = [float(v) for v in str(raw).split(";") if v != ""] or [0.0]
    ends = starts[1:] + [float(t[-1]) + 1e-9]
    return list(zip(starts, ends))


def signals(trace: ScenarioTrace) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(times, values, reference) per evaluated signal.

    ``ratio`` emulates flow cytometry: true x2/x1 sampled every ``facs_interval``
    minutes. ``ratio_est`` uses the 1-minute observer estimates.
    """
    t = trace["t"]
    out = {}
    if np.any(trace["x1"] > 0):
        od = trace["x1"] + trace["x2"]
        out["od"] = (t, od, trace["od_d"])
        facs = float(trace.meta.get("facs_interval", 10.0))
        sel = np.isclose(np.mod(t + 1e-9, facs), 0.0, atol=1e-6)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = trace["x2"] / trace["x1"]
            ratio_est = trace["x2_hat"] / trace["x1_hat"]
        out["ratio"] = (t[sel], ratio[sel], trace["r_d"][sel])
        out["ratio_est"] = (t, ratio_est, trace["r_d"])
    out["x2r"] = (t, trace["x2r"], trace["x2r_d"])
    return out


def evaluate_trace(trace: ScenarioTrace) -> dict:
    """Settling time (relative to segment start) and NRMSE per signal and segment.

    Segments are delimited by reference changes and perturbation events. Missing
    entries mean the metric is undefined on that segment (never settles).
    """
    res = {}
    for name, (t, x, ref) in signals(trace).items():
        for i, (a, b) in enumerate(_segments(trace)):
            sel = (t >= a) & (t < b)
            if sel.sum() < 5:
                continue
            ts_abs = metrics.settling_time(x[sel], t[sel])
            entry = {"start": a, "settling": math.inf, "nrmse": math.nan}
            if math.isfinite(ts_abs):
                entry["settling"] = ts_abs - a
                entry["nrmse"] = metrics.nrmse(x[sel], t[sel], float(ref[sel][-1]), ts_abs)
            res[(name, i)] = entry
    return res


def replicate_stats(groups, metric: str = "settling") -> dict:
    """Aggregate ``metric`` ('settling' or 'nrmse') across replicates.

    ``groups`` maps variant name -> list of traces (a bare list is one variant).
    Returns ``{"summary": {variant: {key: (mean, std, n, excluded)}},
    "pvalues": {(key, v1, v2): p}}``; undefined replicate values are excluded.
    """
    if not isinstance(groups, dict):
        groups = {"all": list(groups)}
    values = {}
    summary = {}
    for variant, traces in groups.items():
        per = [evaluate_trace(tr) for tr in traces]
        keys = sorted(set().union(*per)) if per else []
        summary[variant] = {}
        values[variant] = {}
        for key in keys:
            v = np.array([d[key][metric] if key in d else math.nan for d in per], dtype=float)
            values[variant][key] = v
            ok = v[np.isfinite(v)]
            summary[variant][key] = (
                float(ok.mean()) if ok.size else math.nan,
                float(ok.std()) if ok.size else math.nan,
                int(ok.size),
                int(v.size - ok.size),
            )
    pvalues = {}
    names = list(groups)
    for i, v1 in enumerate(names):
        for v2 in names[i + 1:]:
            for key in set(values[v1]) & set(values[v2]):
                a, b = values[v1][key], values[v2][key]
                ok = np.isfinite(a) & np.isfinite(b)
                if ok.sum() >= 2:
                    pvalues[(key, v1, v2)] = metrics.paired_ttest(a[ok], b[ok])
    return {"summary": summary, "pvalues": pvalues}


def full_state_switching(x0: tuple[float, float], ref: Reference,
                         gains: SwitchingGains = SwitchingGains(), duration: float = 300.0,
                         h: float = 0.01, p: PlantParams = PlantParams(meas_noise_var=0.0)):
    """Noise-free switching loop on the true state of the simplified mixing chamber.

    The law is re-evaluated every ``h`` minutes (a fine hold approximating the
    continuous-time design) and the reservoir is held at ``ref.x2r_d``.
    Returns arrays ``(t, x1, x2)``.
    """
    n = int(round(duration / h))
    ctrl = SwitchingController(gains)
    x1, x2 = x0
    out = np.empty((n + 1, 3))
    out[0] = 0.0, x1, x2
    for k in range(1, n + 1):
        u = ctrl(x1, x2, ref)
        x1, x2 = mixing_exact_step(x1, x2, u, p, h, ref.x2r_d)
        out[k] = k * h, x1, x2
    return out[:, 0], out[:, 1], out[:, 2]


def coculture_estimation_trace(seed: int, x0: tuple[float, float] = (0.1, 0.1),
                               od: float = 0.6, duration: float = 240.0,
                               cfg: EkfConfig = EkfConfig(), p: PlantParams = PlantParams(),
                               model: str = "full", init_ratio: float | None = 1.0) -> ScenarioTrace:
    """Co-culture with no strain-2 inflow, OD held near ``od`` by a bang-bang D1.

    The filter runs online on the noisy measurement; the trace keeps both the
    ground truth and the estimates, so ``estimation_mse``-style comparisons
    can be made directly on its columns.
    """
    rng = make_rng(seed, "measurement")
    state = PlantState(x0[0], x0[1], p.s_in, 0.0, p.s_in)
    n = int(round(duration)) + 1
    rows, est, u = [], None, ControlInput()
    for k in range(n):
        y1 = wire(measure(state, p, rng, float(k)).y1)
        if est is None:
            est = initial_estimate(y1, cfg, init_ratio, 0.0)
        else:
            est = ekf_step(est, u, y1, p, cfg, 1.0, x2r=0.0)
        u = ControlInput(0.02 if y1 > od else 0.0, 0.0, 0.0)
        rows.append(dict(t=float(k), x1=state.x1, x2=state.x2, s1=state.s1, x2r=state.x2r,
                         s2=state.s2, y1=y1, y2=0.0, x1_hat=est.x1_hat, x2_hat=est.x2_hat,
                         d1=u.d1, d2=0.0, dr=0.0, r_d=0.0, od_d=od, x2r_d=0.0))
        if k < n - 1:
            state = step(state, u, p, 1.0, model)
    meta = {"scenario": "coculture-estimation", "seed": seed,
            "ekf_init_ratio": "none" if init_ratio is None else init_ratio}
    return ScenarioTrace.from_rows(rows, meta)


def with_controllers(s: Scenario, mixing: str | None = None, reservoir: str | None = None) -> Scenario:
    return replace(s, mixing=mixing or s.mixing, reservoir=reservoir or s.reservoir)
