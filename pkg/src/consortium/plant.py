"""Two-chamber chemostat dynamics: mixing chamber (both strains) and reservoir (slow strain).

Pump commands are device units in ``[d_min, d_max]``; inside the ODEs every
command is divided by ``tau`` to give a dilution rate in 1/min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

MAX_SUBSTEP = 0.1  # min


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantParams:
    mu1_star: float = 0.021
    mu2_star: float = 0.011
    k1: float = 0.1
    k2: float = 0.1
    s_in: float = 10.0
    tau: float = 0.215
    d_min: float = 0.0
    d_max: float = 0.02
    x_min: float = 0.2
    x_max: float = 1.0
    meas_noise_var: float = 0.001

    def __post_init__(self):
        if not self.mu1_star > self.mu2_star > 0:
            raise ValueError("growth rates must satisfy mu1_star > mu2_star > 0")
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("pump bounds must satisfy 0 <= d_min < d_max")
        if not 0 < self.x_min < self.x_max:
            raise ValueError("viability bounds must satisfy 0 < x_min < x_max")
        if self.tau <= 0 or self.k1 <= 0 or self.k2 <= 0 or self.s_in <= 0:
            raise ValueError("tau, k1, k2 and s_in must be positive")
        if self.meas_noise_var < 0:
            raise ValueError("meas_noise_var must be non-negative")

    def scaled(self, mu1: float = 1.0, mu2: float = 1.0) -> "PlantParams":
        """Copy with growth rates multiplied by the given factors."""
        return replace(self, mu1_star=self.mu1_star * mu1, mu2_star=self.mu2_star * mu2)


@dataclass(frozen=True)
class PlantState:
    x1: float = 0.0
    x2: float = 0.0
    s1: float = 0.0
    x2r: float = 0.0
    s2: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.s1, self.x2r, self.s2])

    @classmethod
    def from_array(cls, a) -> "PlantState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlInput:
    d1: float = 0.0
    d2: float = 0.0
    dr: float = 0.0

    def clamped(self, p: PlantParams) -> "ControlInput":
        c = lambda v: min(max(v, p.d_min), p.d_max)  # noqa: E731
        return ControlInput(c(self.d1), c(self.d2), c(self.dr))


@dataclass(frozen=True)
class Measurement:
    y1: float
    y2: float
    t: float = 0.0


def monod_rate(mu_star: float, k: float, s: float) -> float:
    if s < 0:
        raise ValueError(f"substrate concentration must be non-negative, got {s}")
    return mu_star * s / (k + s)


def _full_rhs(x, u: ControlInput, p: PlantParams):
    x1, x2, s1, x2r, s2 = x
    d1, d2, dr = u.d1 / p.tau, u.d2 / p.tau, u.dr / p.tau
    mu1 = p.mu1_star * s1 / (p.k1 + s1)
    mu2 = p.mu2_star * s1 / (p.k2 + s1)
    mu2r = p.mu2_star * s2 / (p.k2 + s2)
    return (
        mu1 * x1 - d1 * x1 - d2 * x1,
        mu2 * x2 - d1 * x2 + d2 * (x2r - x2),
        -mu1 * x1 - mu2 * x2 + d1 * (p.s_in - s1) + d2 * (s2 - s1),
        mu2r * x2r - dr * x2r - d2 * x2r,
        -mu2r * x2r + (dr + d2) * (p.s_in - s2),
    )


def _simplified_rhs(x, u: ControlInput, p: PlantParams):
    x1, x2, _, x2r, _ = x
    d1, d2, dr = u.d1 / p.tau, u.d2 / p.tau, u.dr / p.tau
    return (
        p.mu1_star * x1 - (d1 + d2) * x1,
        p.mu2_star * x2 - d1 * x2 + d2 * (x2r - x2),
        0.0,
        p.mu2_star * x2r - (dr + d2) * x2r,
        0.0,
    )


def full_derivatives(state: PlantState, u: ControlInput, p: PlantParams) -> PlantState:
    """Time derivatives of the Monod model (yield 1). Returned as a PlantState of rates."""
    return PlantState(*_full_rhs(astuple_state(state), u, p))


def simplified_derivatives(state: PlantState, u: ControlInput, p: PlantParams) -> PlantState:
    """Abundant-substrate model: growth at mu_star, substrates held constant."""
    return PlantState(*_simplified_rhs(astuple_state(state), u, p))


def astuple_state(s: PlantState):
    return (s.x1, s.x2, s.s1, s.x2r, s.s2)


_RHS = {"full": _full_rhs, "simplified": _simplified_rhs}


def step(state: PlantState, u: ControlInput, p: PlantParams, dt: float,
         model: str = "full", max_substep: float = MAX_SUBSTEP) -> PlantState:
    """Advance ``dt`` minutes with RK4 under a held input, clamping at zero after every substep."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state
    rhs = _RHS[model]
    n = max(1, math.ceil(dt / max_substep - 1e-9))
    h = dt / n
    x = astuple_state(state)
    for _ in range(n):
        k1 = rhs(x, u, p)
        k2 = rhs(tuple(a + 0.5 * h * b for a, b in zip(x, k1)), u, p)
        k3 = rhs(tuple(a + 0.5 * h * b for a, b in zip(x, k2)), u, p)
        k4 = rhs(tuple(a + h * b for a, b in zip(x, k3)), u, p)
        x = tuple(
            a + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)
        )
        # check before clamping: max(0.0, nan) would silently return 0.0
        if not all(math.isfinite(v) for v in x):
            raise IntegrationError(f"non-finite state {x}")
        x = tuple(max(0.0, v) for v in x)
    return PlantState(*x)


def mixing_exact_step(x1: float, x2: float, u: ControlInput, p: PlantParams, dt: float,
                      x2r: float) -> tuple[float, float]:
    """Closed-form simplified mixing-chamber update over ``dt`` with the
    reservoir density held at ``x2r``: x' = a x + b solved exactly."""
    d = (u.d1 + u.d2) / p.tau
    a1, a2 = p.mu1_star - d, p.mu2_star - d
    b = u.d2 / p.tau * x2r
    e2 = math.exp(a2 * dt)
    x2n = x2 * e2 + (b * (e2 - 1.0) / a2 if a2 != 0 else b * dt)
    return x1 * math.exp(a1 * dt), x2n


def measure(state: PlantState, p: PlantParams, rng: np.random.Generator | None = None,
            t: float = 0.0) -> Measurement:
    y1 = state.x1 + state.x2
    y2 = state.x2r
    if p.meas_noise_var > 0:
        if rng is None:
            raise ValueError("a random generator is required when measurement noise is on")
        w = rng.normal(0.0, math.sqrt(p.meas_noise_var), size=2)
        y1 += float(w[0])
        y2 += float(w[1])
    return Measurement(y1, y2, t)


def apply_bolus(state: PlantState, p: PlantParams, dilution_factor: float = 0.87,
                strain_factors: tuple[float, float] | None = None) -> PlantState:
    """Inject fresh media into the mixing chamber.

    ``strain_factors`` overrides the biomass scaling per strain (x1, x2) to model
    uneven mixing; the substrate always follows ``dilution_factor``.
    """
    f = dilution_factor
    if not 0 < f <= 1:
        raise ValueError(f"dilution factor must lie in (0, 1], got {f}")
    f1, f2 = strain_factors if strain_factors is not None else (f, f)
    for v in (f1, f2):
        if not 0 < v <= 1:
            raise ValueError(f"strain factor must lie in (0, 1], got {v}")
    return replace(
        state,
        x1=state.x1 * f1,
        x2=state.x2 * f2,
        s1=state.s1 * f + (1.0 - f) * p.s_in,
    )
