"""Deployable control laws for the mixing chamber and the reservoir.

Every function returns pump commands in device units, clamped to [0, 0.02].
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .plant import ControlInput, PlantParams

log = logging.getLogger(__name__)

D_MAX = 0.02
MIXING_ACTIONS = tuple((d1, d2) for d1 in (0.0, 0.01, 0.02) for d2 in (0.0, 0.02))
RESERVOIR_ACTIONS = tuple(D_MAX * i / 16 for i in range(17))
RECOVERY_THRESHOLD = 0.8
HISTORY = 5


def _clamp(v: float, lo: float = 0.0, hi: float = D_MAX) -> float:
    return min(max(v, lo), hi)


@dataclass(frozen=True)
class Reference:
    r_d: float = 1.0
    od_d: float = 0.7
    x2r_d: float = 0.9

    def validate(self, p: PlantParams) -> None:
        if self.r_d <= 0:
            raise ValueError("r_d must be positive")
        if not 2 * p.x_min < self.od_d <= p.x_max:
            raise ValueError(f"od_d={self.od_d} outside ({2 * p.x_min}, {p.x_max}]")
        if not p.x_min <= self.x2r_d <= p.x_max:
            raise ValueError(f"x2r_d={self.x2r_d} outside [{p.x_min}, {p.x_max}]")


class ReferenceSchedule:
    """Piecewise-constant reference: ``[(t_start, Reference), ...]`` with the first at t=0."""

    def __init__(self, segments):
        segs = sorted(((float(t), r) for t, r in segments), key=lambda s: s[0])
        if not segs or segs[0][0] != 0.0:
            raise ValueError("schedule must start at t=0")
        self.segments = segs
        self._starts = [t for t, _ in segs]

    @classmethod
    def constant(cls, ref: Reference) -> "ReferenceSchedule":
        return cls([(0.0, ref)])

    def at(self, t: float) -> Reference:
        return self.segments[bisect.bisect_right(self._starts, t) - 1][1]

    def boundaries(self, duration: float) -> list[tuple[float, float]]:
        """(start, end) of each segment clipped to ``duration``."""
        ends = self._starts[1:] + [duration]
        return [(s, min(e, duration)) for s, e in zip(self._starts, ends) if s < duration]

    def __repr__(self):
        return f"ReferenceSchedule({self.segments!r})"


def desired_split(ref: Reference) -> tuple[float, float]:
    if ref.r_d <= 0:
        raise ValueError("r_d must be positive")
    x1 = ref.od_d / (1.0 + ref.r_d)
    return x1, ref.od_d - x1


def classify_region(x1: float, x2: float, x1_d: float, x2_d: float) -> str:
    above1, above2 = x1 > x1_d, x2 > x2_d
    if above2:
        return "R2" if above1 else "R1"
    return "R4" if above1 else "R3"


@dataclass(frozen=True)
class SwitchingGains:
    d1_plus: float = 0.02
    d1_minus: float = 0.02
    d2_minus: float = 0.02

    def validate(self, p: PlantParams) -> None:
        for name in ("d1_plus", "d1_minus", "d2_minus"):
            v = getattr(self, name)
            if not p.d_min <= v <= p.d_max:
                raise ValueError(f"{name}={v} outside pump bounds")
            if not v / p.tau > p.mu1_star:
                raise ValueError(f"{name}/tau must exceed mu1_star for convergence")


def switching_law(region: str, gains: SwitchingGains = SwitchingGains()) -> ControlInput:
    # R4 feeds slow strain from the reservoir: only D2 can raise x2
    table = {
        "R1": (gains.d1_plus, 0.0),
        "R2": (gains.d1_minus, 0.0),
        "R3": (0.0, 0.0),
        "R4": (0.0, gains.d2_minus),
    }
    d1, d2 = table[region]
    return ControlInput(d1, d2, 0.0)


class SwitchingController:
    name = "switching"

    def __init__(self, gains: SwitchingGains = SwitchingGains()):
        self.gains = gains

    def reset(self):
        pass

    def __call__(self, x1_hat: float, x2_hat: float, ref: Reference) -> ControlInput:
        return switching_law(classify_region(x1_hat, x2_hat, *desired_split(ref)), self.gains)


def _argmax_lowest(q: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(q))


def dqn_mixing_action(history, net) -> ControlInput:
    """Greedy action from the last five (x1 - x1_d, x2 - x2_d) error pairs, oldest first."""
    hist = list(history)
    if not hist:
        raise ValueError("empty error history")
    hist = [hist[0]] * (HISTORY - len(hist)) + hist[-HISTORY:]
    feats = np.asarray(hist, dtype=float).reshape(-1)
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite features")
    d1, d2 = MIXING_ACTIONS[_argmax_lowest(net.forward(feats))]
    return ControlInput(d1, d2, 0.0)


class DqnMixingController:
    name = "dqn"

    def __init__(self, net):
        self.net = net
        self.states = deque(maxlen=HISTORY)

    def reset(self):
        self.states.clear()

    def __call__(self, x1_hat: float, x2_hat: float, ref: Reference) -> ControlInput:
        self.states.append((x1_hat, x2_hat))
        x1_d, x2_d = desired_split(ref)
        return dqn_mixing_action([(a - x1_d, b - x2_d) for a, b in self.states], self.net)


@dataclass(frozen=True)
class PiState:
    kp: float = 0.2
    ki: float = 0.002
    integral: float = 0.0
    u_prev: float = 0.0


def pi_reservoir(pi: PiState, y2: float, x2r_d: float, dt: float = 1.0) -> tuple[float, PiState]:
    """PI on reservoir density; positive error (too dense) means more dilution.

    Conditional integration: the integral only moves while the output is
    unsaturated, or when the error pushes the output back off the bound.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = y2 - x2r_d
    raw = pi.kp * e + pi.ki * pi.integral
    u = _clamp(raw)
    integral = pi.integral
    if (0.0 < raw < D_MAX) or (raw >= D_MAX and e < 0) or (raw <= 0.0 and e > 0):
        integral += e * dt
    return u, replace(pi, integral=integral, u_prev=u)


def mpc_costs(x2r: float, x2r_d: float, p: PlantParams, horizon: int = 5, dt: float = 1.0,
              actions=RESERVOIR_ACTIONS) -> np.ndarray:
    """Cost of each constant-over-horizon action under the abundant-substrate reservoir model."""
    costs = np.empty(len(actions))
    for i, u in enumerate(actions):
        if not 0.0 <= u <= D_MAX:
            costs[i] = 100.0 * horizon + 100.0
            continue
        g = math.exp((p.mu2_star - u / p.tau) * dt)
        x, c = x2r, 0.0
        for _ in range(horizon):
            c += (x - x2r_d) ** 2
            x *= g
        costs[i] = c + (x - x2r_d) ** 2
    return costs


def mpc_reservoir(x2r: float, x2r_d: float, p: PlantParams, horizon: int = 5, dt: float = 1.0) -> float:
    if x2r < 0:
        x2r = 0.0
    return RESERVOIR_ACTIONS[_argmax_lowest(-mpc_costs(x2r, x2r_d, p, horizon, dt))]


def dqn_reservoir_action(x2r: float, x2r_d: float, net) -> float:
    feats = np.array([x2r, x2r_d], dtype=float)
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite features")
    return RESERVOIR_ACTIONS[_argmax_lowest(net.forward(feats))]


class PiReservoir:
    name = "pi"

    def __init__(self, kp: float = 0.2, ki: float = 0.002, dt: float = 1.0):
        self.init = PiState(kp, ki)
        self.dt = dt
        self.state = self.init

    def reset(self):
        self.state = self.init

    def __call__(self, y2: float, x2r_d: float) -> float:
        u, self.state = pi_reservoir(self.state, y2, x2r_d, self.dt)
        return u


class MpcReservoir:
    name = "mpc"

    def __init__(self, p: PlantParams, horizon: int = 5, dt: float = 1.0):
        self.p, self.horizon, self.dt = p, horizon, dt

    def reset(self):
        pass

    def __call__(self, y2: float, x2r_d: float) -> float:
        return mpc_reservoir(y2, x2r_d, self.p, self.horizon, self.dt)


class DqnReservoir:
    name = "dqn"

    def __init__(self, net):
        self.net = net

    def reset(self):
        pass

    def __call__(self, y2: float, x2r_d: float) -> float:
        return dqn_reservoir_action(y2, x2r_d, self.net)


def compensate_reservoir(d_r2: float, d2: float) -> float:
    """Fresh-media command that yields total reservoir dilution d_r2 given outflow d2."""
    dr = d_r2 - d2
    if dr < 0:
        log.debug("reservoir compensation saturated: d_r2=%g < d2=%g", d_r2, d2)
    return _clamp(dr)


def recovery_gate(x2r: float, d2_requested: float, closed: bool = False,
                  threshold: float = RECOVERY_THRESHOLD) -> tuple[float, bool]:
    """Block reservoir outflow while the reservoir is below ``threshold``.

    Returns ``(d2, closed)``; the latch releases once ``x2r >= threshold``.
    """
    if x2r < threshold:
        return 0.0, True
    return _clamp(d2_requested), False
