"""Feedback control of defragmentation.

A two-state machine.  While *waiting* it wakes every poll interval and
compares fragmentation against the upper bound.  Once above it, it switches
to *defragmenting* and runs partial passes, each limited to ``alpha`` of the
heap extent.  After a pass that took ``T`` seconds it sleeps ``T / O_ub`` so
that defragmentation stays within the overhead bound.  It returns to
waiting when fragmentation falls under the lower bound or a pass moves
nothing.

All times are seconds.  The clock is supplied by the caller, so the same
code drives both virtual-time simulations and live runs.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Optional, Union

SLEEP_FLOOR = 0.001


class ConfigError(ValueError):
    pass


class Mode(enum.Enum):
    WAITING = "waiting"
    DEFRAGMENTING = "defrag"


@dataclass(frozen=True)
class ControlParams:
    f_lb: float = 1.2
    f_ub: float = 1.5
    o_lb: float = 0.01
    o_ub: float = 0.05
    alpha: float = 0.25
    poll_interval: float = 0.5

    def __post_init__(self):
        if not self.f_lb < self.f_ub:
            raise ConfigError(f"need f_lb < f_ub, got {self.f_lb} >= {self.f_ub}")
        if not 0 <= self.o_lb <= self.o_ub <= 1:
            raise ConfigError(f"need 0 <= o_lb <= o_ub <= 1, got [{self.o_lb}, {self.o_ub}]")
        if self.o_ub <= 0:
            raise ConfigError("o_ub must be positive")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.poll_interval <= 0:
            raise ConfigError("poll_interval must be positive")


@dataclass(frozen=True)
class Sleep:
    duration: float


@dataclass(frozen=True)
class RunPartialPass:
    budget_bytes: int


Action = Union[Sleep, RunPartialPass]


@dataclass
class ControlState:
    mode: Mode = Mode.WAITING
    next_wake: float = 0.0
    last_t_defrag: float = 0.0
    last_moved: int = 0
    pass_pending: bool = False
    cumulative_defrag_time: float = 0.0
    start_time: float = 0.0
    passes: int = 0
    last_sleep: float = 0.0

    def cumulative_wall_time(self, now: float) -> float:
        return now - self.start_time

    def overhead(self, now: float) -> float:
        wall = now - self.start_time
        return self.cumulative_defrag_time / wall if wall > 0 else 0.0


def compute_sleep(t_defrag: float, o_ub: float) -> float:
    if o_ub <= 0:
        raise ConfigError("o_ub must be positive")
    return t_defrag / o_ub


def clamp_sleep(t_defrag: float, params: ControlParams) -> float:
    s = compute_sleep(t_defrag, params.o_ub)
    if params.o_lb > 0:
        s = min(s, t_defrag / params.o_lb)
    return max(s, SLEEP_FLOOR)


def record_pass(state: ControlState, t_defrag: float, moved_bytes: int) -> None:
    """Feed back the outcome of the pass requested by the last tick."""
    state.last_t_defrag = t_defrag
    state.last_moved = moved_bytes
    state.cumulative_defrag_time += t_defrag
    state.pass_pending = True
    state.passes += 1


def control_tick(state: ControlState, params: ControlParams, frag: float,
                 now: float, extent_bytes: int) -> Action:
    """Advance the state machine at a wake-up.

    The caller must run the returned pass (then call :func:`record_pass` and
    tick again immediately) or sleep until ``state.next_wake``.
    """
    if now + 1e-12 < state.next_wake:
        raise ValueError(f"tick at {now} before scheduled wake {state.next_wake}")

    def sleep(d: float) -> Sleep:
        state.next_wake = now + d
        state.last_sleep = d
        return Sleep(d)

    def run() -> RunPartialPass:
        state.next_wake = now
        return RunPartialPass(int(params.alpha * extent_bytes))

    if state.mode is Mode.WAITING:
        if frag > params.f_ub:
            state.mode = Mode.DEFRAGMENTING
            state.pass_pending = False
            return run()
        return sleep(params.poll_interval)

    if state.pass_pending:
        state.pass_pending = False
        backoff = clamp_sleep(state.last_t_defrag, params)
        if frag < params.f_lb or state.last_moved == 0:
            state.mode = Mode.WAITING
            # keep the back-off even when leaving, so the pass is paid for
            return sleep(max(params.poll_interval, backoff))
        return sleep(backoff)
    return run()


class VirtualClock:
    def __init__(self, start: float = 0.0) -> None:
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float) -> float:
        self.now += dt
        return self.now

    def advance_to(self, t: float) -> float:
        if t > self.now:
            self.now = t
        return self.now


class MonotonicClock:
    def __call__(self) -> float:
        return time.monotonic()


@dataclass
class TraceRow:
    time: float
    mode: str
    frag: float
    action: str
    value: float

    HEADER = "time,mode,frag,action,value"

    def csv(self) -> str:
        return f"{self.time:.6f},{self.mode},{self.frag:.6f},{self.action},{self.value:.6f}"


def action_row(now: float, state: ControlState, frag: float, action: Action) -> TraceRow:
    if isinstance(action, Sleep):
        return TraceRow(now, state.mode.value, frag, "sleep", action.duration)
    return TraceRow(now, state.mode.value, frag, "pass", float(action.budget_bytes))


class Controller:
    """Binds the state machine to a heap and a clock for live runs."""

    def __init__(self, params: ControlParams, clock=None,
                 state: Optional[ControlState] = None) -> None:
        self.params = params
        self.clock = clock or MonotonicClock()
        self.state = state or ControlState(start_time=self.clock(), next_wake=self.clock())
        self.trace = []

    def due(self) -> bool:
        return self.clock() >= self.state.next_wake

    def tick(self, frag: float, extent_bytes: int) -> Action:
        now = self.clock()
        act = control_tick(self.state, self.params, frag, now, extent_bytes)
        self.trace.append(action_row(now, self.state, frag, act))
        return act
