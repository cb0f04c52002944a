import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consortium.control import (
    D_MAX, MIXING_ACTIONS, RESERVOIR_ACTIONS, DqnMixingController, PiReservoir, PiState,
    Reference, ReferenceSchedule, SwitchingController, SwitchingGains, classify_region,
    compensate_reservoir, desired_split, dqn_mixing_action, dqn_reservoir_action, mpc_costs,
    mpc_reservoir, pi_reservoir, recovery_gate, switching_law,
)
from consortium.harness import full_state_switching
from consortium.plant import ControlInput, PlantParams
from consortium.rl import QNetwork
from consortium.streams import make_rng

P = PlantParams()


def test_reference_validation_and_schedule():
    Reference(0.6, 0.7, 0.9).validate(P)
    with pytest.raises(ValueError):
        Reference(0.0).validate(P)
    with pytest.raises(ValueError):
        Reference(1.0, 0.3).validate(P)
    with pytest.raises(ValueError):
        Reference(1.0, 0.7, 1.2).validate(P)
    sched = ReferenceSchedule([(60, Reference(0.6)), (0, Reference(1.0))])
    assert sched.at(0).r_d == 1.0 and sched.at(59.9).r_d == 1.0 and sched.at(60).r_d == 0.6
    assert sched.boundaries(90) == [(0.0, 60.0), (60.0, 90)]
    with pytest.raises(ValueError):
        ReferenceSchedule([(5, Reference())])


def test_desired_split_examples():
    assert desired_split(Reference(1.0, 0.7)) == pytest.approx((0.35, 0.35))
    assert desired_split(Reference(0.6, 0.7)) == pytest.approx((0.4375, 0.2625))
    assert desired_split(Reference(1.5, 0.7)) == pytest.approx((0.28, 0.42))
    with pytest.raises(ValueError):
        desired_split(Reference(-1.0))


@given(st.floats(0.05, 20.0), st.floats(0.41, 1.0))
def test_desired_split_exact(r, od):
    x1, x2 = desired_split(Reference(r, od))
    assert x1 + x2 == pytest.approx(od, rel=1e-15, abs=1e-15)
    assert x2 / x1 == pytest.approx(r, rel=1e-14)


def test_regions_and_law():
    target = (0.4375, 0.2625)
    assert classify_region(0.3, 0.5, *target) == "R1"
    assert classify_region(0.5, 0.5, *target) == "R2"
    assert classify_region(*target, *target) == "R3"
    assert classify_region(0.5, 0.1, *target) == "R4"
    g = SwitchingGains()
    assert switching_law("R3", g) == ControlInput(0.0, 0.0)
    assert switching_law("R4", g) == ControlInput(0.0, 0.02)
    assert switching_law("R1", g) == ControlInput(0.02, 0.0)
    assert switching_law("R2", g) == ControlInput(0.02, 0.0)


def test_gain_validation():
    SwitchingGains().validate(P)
    SwitchingGains(0.01, 0.01, 0.01).validate(P)
    with pytest.raises(ValueError):
        SwitchingGains(0.004, 0.02, 0.02).validate(P)  # 0.004/tau < mu1*
    with pytest.raises(ValueError):
        SwitchingGains(0.03, 0.02, 0.02).validate(P)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.25, 0.9), st.floats(0.25, 0.9))
def test_switching_converges_from_box(x1, x2):
    ref = Reference(0.6, 0.7, 0.9)
    x1_d, x2_d = desired_split(ref)
    t, a, b = full_state_switching((x1, x2), ref, SwitchingGains(), duration=300.0, h=0.01)
    inside = (np.abs(a - x1_d) <= 0.01 * x1_d) & (np.abs(b - x2_d) <= 0.01 * x2_d)
    assert inside[-1]
    entered = t[np.flatnonzero(~inside)[-1] + 1]
    assert entered < 300.0


def test_dqn_mixing_tie_break_and_padding():
    zero = QNetwork.zeros((10, 4, 6))
    assert dqn_mixing_action([(0.1, -0.1)], zero) == ControlInput(0.0, 0.0)
    with pytest.raises(ValueError):
        dqn_mixing_action([], zero)
    with pytest.raises(ValueError):
        dqn_mixing_action([(math.nan, 0.0)], zero)
    ctrl = DqnMixingController(zero)
    ctrl(0.3, 0.3, Reference())
    assert len(ctrl.states) == 1
    ctrl.reset()
    assert len(ctrl.states) == 0


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=9),
       st.integers(0, 2**31))
def test_dqn_actions_in_grid(hist, seed):
    net = QNetwork.initialize((10, 8, 6), make_rng(seed))
    u = dqn_mixing_action(hist, net)
    assert (u.d1, u.d2) in MIXING_ACTIONS
    rnet = QNetwork.initialize((2, 8, 17), make_rng(seed))
    assert dqn_reservoir_action(hist[0][0], 0.5, rnet) in RESERVOIR_ACTIONS
    assert dqn_reservoir_action(0.3, 0.5, QNetwork.zeros((2, 3, 17))) == 0.0


def test_pi_examples():
    u, st_ = pi_reservoir(PiState(), 0.5, 0.5)
    assert u == 0.0 and st_.integral == 0.0
    u, _ = pi_reservoir(PiState(), 1.0, 0.2)
    assert u == D_MAX
    with pytest.raises(ValueError):
        pi_reservoir(PiState(), 0.5, 0.5, dt=0.0)


def test_pi_anti_windup_recovers_quickly():
    pi = PiState()
    for _ in range(200):  # long saturation at the upper bound
        u, pi = pi_reservoir(pi, 0.9, 0.5)
    assert u == D_MAX
    for k in range(1, 6):
        u, pi = pi_reservoir(pi, 0.45, 0.5)
        if u < D_MAX:
            break
    assert u < D_MAX and k <= 5


@given(st.floats(0.0, 2.0), st.floats(0.2, 1.0), st.floats(0.01, 5.0))
def test_pi_output_bounded(y, ref, dt):
    u, _ = pi_reservoir(PiState(integral=3.0), y, ref, dt)
    assert 0.0 <= u <= D_MAX


def mpc_oracle(x2r, x2r_d, p, horizon=5):
    """Exhaustive enumeration by direct forward simulation of the growth model."""
    best, best_cost = None, math.inf
    for u in RESERVOIR_ACTIONS:
        x, cost = x2r, 0.0
        for _ in range(horizon):
            cost += (x - x2r_d) ** 2
            x = x * math.exp(p.mu2_star - u / p.tau)
        cost += (x - x2r_d) ** 2
        if cost < best_cost - 1e-15:
            best, best_cost = u, cost
    return best, best_cost


@given(st.floats(0.0, 1.2), st.floats(0.2, 1.0))
def test_mpc_matches_enumeration_oracle(x, ref):
    u = mpc_reservoir(x, ref, P)
    _, best_cost = mpc_oracle(x, ref, P)
    costs = mpc_costs(x, ref, P)
    assert costs[RESERVOIR_ACTIONS.index(u)] == pytest.approx(best_cost, rel=1e-12, abs=1e-15)


def test_mpc_extremes():
    assert mpc_reservoir(1.0, 0.3, P) == D_MAX
    assert mpc_reservoir(0.2, 0.9, P) == 0.0
    u = mpc_reservoir(0.5, 0.5, P)
    assert u == mpc_oracle(0.5, 0.5, P)[0]


def test_compensation_and_gate():
    assert compensate_reservoir(0.02, 0.02) == 0.0
    assert compensate_reservoir(0.01, 0.0) == 0.01
    assert compensate_reservoir(0.005, 0.02) == 0.0
    assert recovery_gate(0.75, 0.02) == (0.0, True)
    assert recovery_gate(0.85, 0.02, closed=False) == (0.02, False)
    assert recovery_gate(0.8, 0.02, closed=True) == (0.02, False)


@given(st.floats(-1.0, 3.0), st.floats(-1.0, 3.0), st.floats(0.0, 1.5), st.floats(0.2, 1.0))
def test_all_commands_within_bounds(a, b, x, ref):
    for v in (compensate_reservoir(a, b), recovery_gate(x, a)[0], mpc_reservoir(x, ref, P),
              PiReservoir()(x, ref)):
        assert 0.0 <= v <= D_MAX
    for region in ("R1", "R2", "R3", "R4"):
        u = switching_law(region)
        assert all(0.0 <= v <= D_MAX for v in (u.d1, u.d2, u.dr))


def test_action_grids():
    assert len(MIXING_ACTIONS) == 6 and MIXING_ACTIONS[0] == (0.0, 0.0)
    assert len(RESERVOIR_ACTIONS) == 17
    assert RESERVOIR_ACTIONS[0] == 0.0 and RESERVOIR_ACTIONS[-1] == D_MAX
    assert np.allclose(np.diff(RESERVOIR_ACTIONS), D_MAX / 16)
    assert set(itertools.chain.from_iterable(MIXING_ACTIONS)) <= {0.0, 0.01, 0.02}
