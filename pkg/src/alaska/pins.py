"""Per-mutator pin tracking and the stop-the-world barrier.

Each mutator keeps a private stack of fixed-size pin frames, one per active
function invocation.  Pinning writes a handle into a slot of the top frame
and releasing clears it; neither touches shared state.  A barrier raises a
shared flag that mutators observe at safepoint polls.  A mutator that is
inside an external call counts as joined by proxy, since external code
cannot create pins.

Two execution styles are supported.  With ``threaded=False`` mutators are
cooperative (usually generators driven by :class:`DeterministicScheduler`)
and a poll merely marks the mutator parked; the scheduler stops resuming
parked mutators.  With ``threaded=True`` a poll blocks the calling thread
until the barrier ends.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

from .handles import HANDLE_TAG, handle_id


class PinError(Exception):
    pass


class PinSlotError(PinError):
    """A slot index outside the frame: the compiler sized the frame wrong."""


class BarrierError(PinError):
    pass


class PinFrame:
    __slots__ = ("owner", "slots")

    def __init__(self, owner: str, slot_count: int) -> None:
        self.owner = owner
        self.slots: List[Optional[int]] = [None] * slot_count

    def handles(self) -> List[int]:
        return [h for h in self.slots if h is not None]

    def __repr__(self) -> str:
        return f"<PinFrame {self.owner} {self.slots}>"


@dataclass(frozen=True)
class GlobalPinMap:
    pinned_ids: frozenset = frozenset()

    def __contains__(self, hid: int) -> bool:
        return hid in self.pinned_ids

    def __len__(self) -> int:
        return len(self.pinned_ids)

    def __iter__(self):
        return iter(self.pinned_ids)


EMPTY_PIN_MAP = GlobalPinMap()


def unify(frame_stacks: Iterable[Iterable[PinFrame]]) -> GlobalPinMap:
    ids = set()
    for stack in frame_stacks:
        for frame in stack:
            for h in frame.slots:
                if h is not None:
                    ids.add(handle_id(h))
    return GlobalPinMap(frozenset(ids))


@dataclass
class PauseRecord:
    epoch: int
    start: float
    duration: float


class MutatorContext:
    """One mutator's pin state.  Only the owning mutator writes its frames."""

    def __init__(self, runtime: Optional["PinRuntime"] = None, name: str = "") -> None:
        self.name = name
        self.frame_stack: List[PinFrame] = []
        self.at_safepoint = False
        self.parked = False
        self.external_call_depth = 0
        self.published: Optional[List[PinFrame]] = None
        self.runtime = runtime
        if runtime is not None:
            runtime.register(self)

    # frames -----------------------------------------------------------
    def frame_push(self, fn: str, slot_count: int) -> PinFrame:
        if slot_count < 0:
            raise ValueError("slot_count must be >= 0")
        if self.external_call_depth:
            raise PinError("cannot push a pin frame below an external call")
        frame = PinFrame(fn, slot_count)
        self.frame_stack.append(frame)
        return frame

    def frame_pop(self) -> PinFrame:
        if not self.frame_stack:
            raise PinError("pin frame stack underflow")
        return self.frame_stack.pop()

    @property
    def depth(self) -> int:
        return len(self.frame_stack)

    # pins ---------------------------------------------------------------
    def pin(self, slot: int, h: int) -> None:
        frame = self.frame_stack[-1]
        if not 0 <= slot < len(frame.slots):
            raise PinSlotError(
                f"pin slot {slot} outside frame of {len(frame.slots)} ({frame.owner})")
        if h & HANDLE_TAG:
            frame.slots[slot] = h

    def release(self, slot: int) -> None:
        frame = self.frame_stack[-1]
        if not 0 <= slot < len(frame.slots):
            raise PinSlotError(
                f"release slot {slot} outside frame of {len(frame.slots)} ({frame.owner})")
        frame.slots[slot] = None

    # safepoints -------------------------------------------------------
    def poll(self) -> bool:
        """Safepoint poll.  Returns True if the mutator parked."""
        rt = self.runtime
        if rt is None or not rt.requested:
            return False
        return rt._park(self)

    def external_enter(self) -> None:
        if self.runtime is not None:
            with self.runtime._cond:
                self.external_call_depth += 1
                self.runtime._cond.notify_all()
        else:
            self.external_call_depth += 1

    def external_exit(self) -> bool:
        if self.external_call_depth <= 0:
            raise PinError("external_exit without matching external_enter")
        self.external_call_depth -= 1
        # leaving external code is an implicit safepoint
        return self.poll()

    def snapshot(self) -> List[PinFrame]:
        out = []
        for f in self.frame_stack:
            g = PinFrame(f.owner, 0)
            g.slots = list(f.slots)
            out.append(g)
        return out


class PinRuntime:
    """Barrier coordination across registered mutators."""

    def __init__(self, threaded: bool = False,
                 clock: Callable[[], float] = time.perf_counter) -> None:
        self.threaded = threaded
        self.clock = clock
        self.mutators: List[MutatorContext] = []
        self.requested = False
        self.in_progress = False
        self.joined = 0
        self.epoch = 0
        self.pauses: List[PauseRecord] = []
        self._request_time = 0.0
        self._cond = threading.Condition()

    def register(self, ctx: MutatorContext) -> None:
        with self._cond:
            ctx.runtime = self
            self.mutators.append(ctx)

    def unregister(self, ctx: MutatorContext) -> None:
        with self._cond:
            self.mutators.remove(ctx)
            self._cond.notify_all()

    # mutator side -----------------------------------------------------
    def _park(self, ctx: MutatorContext) -> bool:
        with self._cond:
            if not self.requested or ctx.parked:
                return ctx.parked
            ctx.published = ctx.snapshot()
            ctx.parked = True
            ctx.at_safepoint = True
            self.joined += 1
            self._cond.notify_all()
            if not self.threaded:
                return True
            epoch = self.epoch
            while self.epoch == epoch:
                self._cond.wait()
            return False

    # collector side ---------------------------------------------------
    def request(self) -> None:
        with self._cond:
            if self.requested or self.in_progress:
                raise BarrierError("barrier already in progress")
            self.requested = True
            self.joined = 0
            self._request_time = self.clock()

    def ready(self) -> bool:
        return all(m.parked or m.external_call_depth > 0 for m in self.mutators)

    def barrier_begin(self, drive: Optional[Callable[[], bool]] = None,
                      timeout: Optional[float] = None) -> GlobalPinMap:
        """Stop the world and return the union of all pin frames.

        ``drive`` advances cooperative mutators by one step and returns False
        once nothing can make progress.
        """
        if self.in_progress:
            raise BarrierError("reentrant barrier_begin")
        if not self.requested:
            self.request()
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self._cond:
                if self.ready():
                    break
                if drive is None:
                    if not self.threaded:
                        raise BarrierError(
                            "cooperative mutators not parked and no driver given")
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise BarrierError("barrier timed out waiting for mutators")
                    self._cond.wait(remaining if remaining is not None else 0.05)
                    continue
            if not drive():
                with self._cond:
                    if self.ready():
                        break
                raise BarrierError("mutators stopped before reaching a safepoint")
        with self._cond:
            self.in_progress = True
            stacks = []
            for m in self.mutators:
                if m.parked and m.published is not None:
                    stacks.append(m.published)
                else:
                    # external region: frames are frozen until the call returns
                    stacks.append(m.frame_stack)
            return unify(stacks)

    def barrier_end(self) -> PauseRecord:
        with self._cond:
            if not self.in_progress:
                raise BarrierError("barrier_end without barrier_begin")
            end = self.clock()
            rec = PauseRecord(self.epoch, self._request_time, end - self._request_time)
            self.pauses.append(rec)
            self.in_progress = False
            self.requested = False
            self.joined = 0
            for m in self.mutators:
                m.parked = False
                m.at_safepoint = False
                m.published = None
            self.epoch += 1
            self._cond.notify_all()
            return rec


def safepoint_poll(ctx: MutatorContext) -> bool:
    return ctx.poll()


class DeterministicScheduler:
    """Seeded scheduler for cooperative mutators written as generators.

    Each generator is advanced one ``yield`` at a time; parked mutators are
    skipped until the barrier ends.
    """

    def __init__(self, seed: int = 0) -> None:
        self.rng = random.Random(seed)
        self.tasks: Dict[MutatorContext, object] = {}
        self.finished: List[MutatorContext] = []
        self.steps = 0

    def spawn(self, ctx: MutatorContext, gen) -> None:
        self.tasks[ctx] = gen

    def runnable(self) -> List[MutatorContext]:
        return [c for c in self.tasks if not c.parked]

    def step(self) -> bool:
        ready = self.runnable()
        if not ready:
            return False
        ctx = ready[self.rng.randrange(len(ready))]
        try:
            next(self.tasks[ctx])
        except StopIteration:
            del self.tasks[ctx]
            self.finished.append(ctx)
            if ctx.runtime is not None and ctx in ctx.runtime.mutators:
                ctx.runtime.unregister(ctx)
        self.steps += 1
        return True

    def run(self, max_steps: Optional[int] = None) -> None:
        n = 0
        while self.step():
            n += 1
            if max_steps is not None and n >= max_steps:
                break
