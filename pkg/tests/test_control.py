import random

import pytest
from hypothesis import given, settings, strategies as st

from alaska.control import (SLEEP_FLOOR, ConfigError, ControlParams, ControlState, Controller,
                            Mode, RunPartialPass, Sleep, VirtualClock, clamp_sleep,
                            compute_sleep, control_tick, record_pass)

P = ControlParams(f_lb=1.2, f_ub=1.5, o_lb=0.01, o_ub=0.05, alpha=0.25, poll_interval=0.5)


def test_params_validation():
    for kw in (dict(f_lb=1.5, f_ub=1.5), dict(o_lb=0.2, o_ub=0.1), dict(alpha=0),
               dict(alpha=1.5), dict(o_ub=0.0, o_lb=0.0), dict(poll_interval=0)):
        with pytest.raises(ConfigError):
            ControlParams(**kw)


def test_compute_sleep():
    assert compute_sleep(0.010, 0.05) == pytest.approx(0.2)
    assert compute_sleep(0.0, 0.05) == 0.0
    assert compute_sleep(7.0, 0.05) == pytest.approx(140.0)
    assert compute_sleep(7.0, 0.05) >= 120
    with pytest.raises(ConfigError):
        compute_sleep(1.0, 0.0)


def test_clamp_sleep():
    assert clamp_sleep(0.0, P) == SLEEP_FLOOR
    assert clamp_sleep(7.0, P) == pytest.approx(140.0)
    # the T/O_lb cap is never below T/O_ub since O_lb <= O_ub
    q = ControlParams(o_lb=0.04, o_ub=0.05)
    assert clamp_sleep(1.0, q) == pytest.approx(20.0)
    assert clamp_sleep(1.0, ControlParams(o_lb=0.05, o_ub=0.05)) == pytest.approx(20.0)


def test_waiting_below_bound_sleeps_poll():
    s = ControlState()
    assert control_tick(s, P, 1.1, 0.0, 1000) == Sleep(0.5)
    assert s.mode is Mode.WAITING and s.next_wake == 0.5


def test_waiting_above_bound_runs_pass():
    s = ControlState()
    assert control_tick(s, P, 2.0, 0.0, 1000) == RunPartialPass(250)
    assert s.mode is Mode.DEFRAGMENTING


def test_tick_before_wake_rejected():
    s = ControlState(next_wake=1.0)
    with pytest.raises(ValueError):
        control_tick(s, P, 1.0, 0.5, 0)


def test_hand_evaluated_trace():
    s = ControlState()
    trace = []
    # t=0: above F_ub, first pass over 25% of 4000 bytes
    trace.append(control_tick(s, P, 2.0, 0.0, 4000))
    record_pass(s, 0.010, 1000)
    # still above F_lb and the pass moved bytes: back off T/O_ub = 0.2 s
    trace.append(control_tick(s, P, 1.6, 0.010, 3000))
    trace.append(control_tick(s, P, 1.6, 0.210, 3000))
    record_pass(s, 0.020, 750)
    trace.append(control_tick(s, P, 1.3, 0.230, 2250))
    trace.append(control_tick(s, P, 1.3, 0.630, 2250))
    record_pass(s, 0.005, 500)
    # below F_lb: back to waiting with a poll-interval sleep
    trace.append(control_tick(s, P, 1.1, 0.635, 1750))
    trace.append(control_tick(s, P, 1.4, 1.135, 1750))
    assert trace == [RunPartialPass(1000), Sleep(pytest.approx(0.2)), RunPartialPass(750),
                     Sleep(pytest.approx(0.4)), RunPartialPass(562), Sleep(0.5), Sleep(0.5)]
    assert s.mode is Mode.WAITING
    assert s.passes == 3
    assert s.cumulative_defrag_time == pytest.approx(0.035)


def test_nothing_moved_returns_to_waiting():
    s = ControlState()
    control_tick(s, P, 3.0, 0.0, 100)
    record_pass(s, 0.001, 0)
    assert control_tick(s, P, 3.0, 0.001, 100) == Sleep(0.5)
    assert s.mode is Mode.WAITING


def test_controller_trace_rows():
    clock = VirtualClock()
    c = Controller(P, clock, ControlState())
    c.tick(1.0, 10)
    clock.advance(0.5)
    c.tick(2.0, 10)
    assert [r.action for r in c.trace] == ["sleep", "pass"]
    assert c.trace[0].csv() == "0.000000,waiting,1.000000,sleep,0.500000"


# discrete-event simulation --------------------------------------------------

def simulate(params, rng, horizon, pinned=False):
    """Frag drifts up with mutator work; passes take random time and pull it down."""
    s = ControlState()
    now, frag = 0.0, 1.0
    passes, waits = [], []
    while now < horizon:
        if s.mode is Mode.WAITING:
            waits.append(now)
        act = control_tick(s, params, frag, now, 1 << 20)
        if isinstance(act, RunPartialPass):
            t = rng.uniform(0.001, 2.0)
            passes.append((now, t, frag))
            moved = 0 if pinned else act.budget_bytes
            if not pinned:
                frag = max(1.0, frag - params.alpha * rng.uniform(0.2, 1.0))
            now += t
            record_pass(s, t, moved)
            continue
        dt = s.next_wake - now
        frag += dt * rng.uniform(0.0, 0.3)
        now = s.next_wake
    return passes, waits


def window_overheads(passes, waits, min_window):
    worst = 0.0
    for i, a in enumerate(waits):
        for b in waits[i + 1:]:
            if b - a < min_window:
                continue
            busy = sum(t for st_, t, _ in passes if a <= st_ < b)
            worst = max(worst, busy / (b - a))
    return worst


@given(st.integers(0, 10_000), st.booleans())
@settings(max_examples=40)
def test_overhead_bound_in_simulation(seed, pinned):
    rng = random.Random(seed)
    lb = rng.uniform(1.05, 1.6)
    p = ControlParams(lb, lb + rng.uniform(0.1, 1.0), 0.0, rng.uniform(0.01, 0.3),
                      rng.uniform(0.05, 1.0), rng.choice((0.1, 0.5)))
    passes, waits = simulate(p, rng, 600.0, pinned)
    assert window_overheads(passes, waits, 10 * p.poll_interval) <= p.o_ub * 1.2 + 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=40)
def test_hysteresis(seed):
    rng = random.Random(seed)
    s = ControlState()
    now, frag = 0.0, 1.0
    for _ in range(300):
        was = s.mode
        act = control_tick(s, P, frag, now, 1000)
        if isinstance(act, RunPartialPass):
            if was is Mode.WAITING:
                assert frag > P.f_ub  # a new episode needs the upper bound crossed
            assert act.budget_bytes == int(P.alpha * 1000)
            record_pass(s, 0.01, 1)
            now += 0.01
            frag = max(1.0, frag - 0.1)
        else:
            now = s.next_wake
            frag += rng.uniform(-0.05, 0.2)
