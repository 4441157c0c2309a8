"""Reference interpreter for toy IR, in direct or handle mode.

Direct mode runs an untransformed program on flat, non-moving memory.
Handle mode runs transformed output against the handle table, pin frames
and the defragmenting allocator; ``translate``, ``release`` and
``safepoint`` take effect, and a barrier schedule can force defragmentation
at chosen synchronisation points.  A synchronisation point is every
executed safepoint and every external call (the barrier then happens while
the mutator is inside the call).

Safety checks in handle mode, each with its own exception type:

* every raw address obtained from a translate remembers the object and base
  it came from; an access after that object moved is a stability failure;
* every live object's bytes are checksummed around each barrier;
* no object whose handle was pinned may move;
* when releases are kept, pins and releases must pair up, slots must not
  be shared by two live translations, and the number of simultaneous pins
  never exceeds the frame's slot count.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from .anchorage import Anchorage
from .handles import HANDLE_TAG, HandleFault, handle_id, handle_offset
from .ir.core import Const, Function, Instr, Module, Param
from .pins import PinSlotError
from .runtime import FlatMemory, Runtime

U64 = (1 << 64) - 1
POISON = 0x00DEAD0000000000
POISON_MASK = 0xFFFFFF0000000000


class ExecError(Exception):
    kind = "error"


class DeadHandleError(ExecError):
    kind = "dead-handle"


class BoundsError(ExecError):
    kind = "out-of-bounds"


class UntranslatedAccessError(ExecError):
    kind = "untranslated-access"


class UnbalancedPinError(ExecError):
    kind = "unbalanced-pin"


class SlotOverflowError(ExecError):
    kind = "slot-overflow"


class PinnedStabilityError(ExecError):
    kind = "pinned-stability"


class PinnedMoveError(ExecError):
    kind = "pinned-move"


class CanaryError(ExecError):
    kind = "canary"


class StepLimitError(ExecError):
    kind = "step-limit"


class ArithmeticFault(ExecError):
    kind = "arithmetic"


class InvalidFreeError(ExecError):
    kind = "invalid-free"


def _s64(x: int) -> int:
    x &= U64
    return x - (1 << 64) if x >> 63 else x


# ---------------------------------------------------------------------------
# schedules

@dataclass
class BarrierEvent:
    point: int
    kind: str = "full"  # or "partial"
    budget: Optional[int] = None


@dataclass
class Schedule:
    events: List[BarrierEvent] = field(default_factory=list)
    name: str = ""

    def at(self) -> Dict[int, List[BarrierEvent]]:
        out: Dict[int, List[BarrierEvent]] = {}
        for e in self.events:
            out.setdefault(e.point, []).append(e)
        return out

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "events": [asdict(e) for e in self.events]})

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        d = json.loads(text)
        if isinstance(d, list):
            d = {"events": d}
        events = []
        for e in d.get("events", []):
            kind = e.get("kind", "full")
            if kind not in ("full", "partial"):
                raise ValueError(f"unknown barrier kind {kind!r}")
            events.append(BarrierEvent(int(e["point"]), kind, e.get("budget")))
        return cls(events, d.get("name", ""))

    def without(self, k: int) -> "Schedule":
        return Schedule(self.events[:k] + self.events[k + 1:], self.name)


EMPTY_SCHEDULE = Schedule([], "none")


# ---------------------------------------------------------------------------
# results

@dataclass
class Counters:
    steps: int = 0
    translates: int = 0
    pins: int = 0
    releases: int = 0
    safepoints: int = 0
    sync_points: int = 0
    barriers: int = 0
    moves: int = 0
    externals: int = 0
    allocs: int = 0
    max_pins: int = 0

    HEADER = ("steps,translates,pins,releases,safepoints,sync_points,barriers,moves,"
              "externals,allocs,max_pins")

    def csv_row(self) -> str:
        return ",".join(str(v) for v in asdict(self).values())


@dataclass
class Trace:
    outputs: List[int]
    ret: Optional[int]
    counters: Counters
    assertions: List[str] = field(default_factory=list)
    error: Optional[str] = None
    error_kind: Optional[str] = None
    peak_pins: Dict[str, int] = field(default_factory=dict)  # per function

    def observable(self):
        return (tuple(self.outputs), self.ret, self.error_kind)


@dataclass
class ExecConfig:
    mode: str = "direct"
    seed: int = 0
    step_limit: int = 2_000_000
    schedule: Optional[Schedule] = None
    entry: str = "main"
    span: int = 1 << 16
    check_canaries: bool = True


class _Frame:
    __slots__ = ("regs", "prov", "active", "track")

    def __init__(self, track: bool):
        self.regs: Dict[object, int] = {}
        self.prov: Dict[object, tuple] = {}
        self.active: Dict[Instr, int] = {}
        self.track = track


class Interpreter:
    def __init__(self, module: Module, cfg: ExecConfig) -> None:
        if cfg.mode not in ("direct", "handle"):
            raise ValueError(f"unknown mode {cfg.mode!r}")
        self.module = module
        self.cfg = cfg
        self.handle_mode = cfg.mode == "handle"
        self.counters = Counters()
        self.outputs: List[int] = []
        self.assertions: List[str] = []
        self.peak_pins: Dict[str, int] = {}
        self.events = (cfg.schedule or EMPTY_SCHEDULE).at()
        if self.handle_mode:
            self.svc = Anchorage(span=cfg.span, track_contents=True, record_moves=True)
            self.rt = Runtime(self.svc, check_bounds=False)
            self.ctx = self.rt.new_mutator("main")
            self.mem = self.svc
        else:
            self.svc = None
            self.rt = None
            self.ctx = None
            self.mem = FlatMemory()
        self._releases = {f.name: any(i.op == "release" for i in f.instructions())
                          for f in module}

    # memory ---------------------------------------------------------------
    def _check_addr(self, addr: int, n: int, frame: _Frame, key) -> None:
        if addr & HANDLE_TAG:
            raise UntranslatedAccessError(f"dereference of handle {addr:#x} without translation")
        if addr & POISON_MASK == POISON:
            raise DeadHandleError(f"use of dead handle (raw {addr:#x})")
        if key is not None and frame is not None:
            p = frame.prov.get(key)
            if p is not None:
                self._check_stable(p, addr)
        blk = self.mem.block_containing(addr)
        if blk is None or addr + n > blk[0] + blk[1]:
            raise BoundsError(f"access of {n} bytes at {addr:#x} outside any live object")

    def _check_stable(self, p: tuple, addr: int) -> None:
        hid, base = p
        ent = self.rt.table.entry(hid)
        if not ent.active or ent.base != base:
            raise PinnedStabilityError(
                f"raw address {addr:#x} of handle id {hid} used after the object moved "
                f"({base:#x} -> {ent.base:#x})")

    def _read(self, addr: int, n: int) -> bytes:
        return self.mem.read(addr, n)

    def _write(self, addr: int, data: bytes) -> None:
        self.mem.write(addr, data)

    # allocation -------------------------------------------------------------
    def _alloc(self, size: int, handle: bool) -> int:
        if size <= 0:
            size = 1
        self.counters.allocs += 1
        if not self.handle_mode:
            return self.mem.alloc(size)
        if handle:
            return self.rt.halloc(size)
        return self.svc.alloc(size)

    def _size_of(self, p: int) -> int:
        if p & HANDLE_TAG:
            return self.rt.size_of(p)
        blk = self.mem.block_containing(p)
        if blk is None or blk[0] != p:
            raise InvalidFreeError(f"not the start of an object: {p:#x}")
        return blk[1]

    def _addr_of(self, p: int) -> int:
        if p & HANDLE_TAG:
            try:
                return self.rt.translate(p)
            except HandleFault as e:
                raise DeadHandleError(str(e)) from None
        return p

    def _free(self, p: int) -> None:
        if p == 0:
            return
        if p & HANDLE_TAG:
            if handle_offset(p):
                raise InvalidFreeError(f"free of interior handle {p:#x}")
            try:
                self.rt.hfree(p)
            except HandleFault as e:
                raise InvalidFreeError(str(e)) from None
            return
        try:
            if self.handle_mode:
                self.svc.free(p)
            else:
                self.mem.free(p)
        except Exception as e:
            raise InvalidFreeError(str(e)) from None

    def _builtin(self, callee: str, args: List[int]) -> Optional[int]:
        if callee in ("malloc", "halloc"):
            return self._alloc(args[0], callee == "halloc")
        if callee in ("calloc", "hcalloc"):
            return self._alloc(args[0] * args[1], callee == "hcalloc")
        if callee in ("realloc", "hrealloc"):
            old, size = args
            new = self._alloc(size, callee == "hrealloc")
            if old != 0:
                n = min(self._size_of(old), size)
                if n > 0:
                    self._write(self._addr_of(new), self._read(self._addr_of(old), n))
                self._free(old)
            return new
        if callee in ("free", "hfree"):
            self._free(args[0])
            return None
        raise ExecError(f"unknown builtin @{callee}")

    # externals --------------------------------------------------------------
    def _external(self, callee: str, args: List[int], frame: _Frame, keys) -> Optional[int]:
        self.counters.externals += 1
        if callee == "out":
            self.outputs.append(args[0])
            return None
        if callee == "memset":
            p, v, n = args
            if n > 0:
                self._check_addr(p, n, frame, keys[0])
                self._write(p, bytes([v & 0xFF]) * n)
            return None
        if callee == "memcpy":
            d, s, n = args
            if n > 0:
                self._check_addr(d, n, frame, keys[0])
                self._check_addr(s, n, frame, keys[1])
                self._write(d, self._read(s, n))
            return None
        if callee == "memcmp":
            a, b, n = args
            if n <= 0:
                return 0
            self._check_addr(a, n, frame, keys[0])
            self._check_addr(b, n, frame, keys[1])
            x, y = self._read(a, n), self._read(b, n)
            return (x > y) - (x < y)
        if callee == "checksum":
            p, n = args
            if n <= 0:
                return 0
            self._check_addr(p, n, frame, keys[0])
            return zlib.crc32(self._read(p, n)) & 0x7FFFFFFF
        raise ExecError(f"unknown external @{callee}")

    # barriers ---------------------------------------------------------------
    def _sync_point(self, in_external: bool) -> None:
        k = self.counters.sync_points
        self.counters.sync_points += 1
        if not self.handle_mode:
            return
        for ev in self.events.get(k, ()):
            self._barrier(ev, in_external)

    def _canaries(self) -> Dict[int, int]:
        out = {}
        for b in self.svc.live_blocks():
            if b.hid is not None:
                out[b.hid] = zlib.crc32(self.svc.read(b.addr, b.req))
        return out

    def _barrier(self, ev: BarrierEvent, in_external: bool) -> None:
        pins = self.rt.pins
        ctx = self.ctx
        if in_external:
            ctx.external_enter()
        pins.request()
        if not in_external:
            ctx.poll()
        pin_map = pins.barrier_begin()
        before = self._canaries() if self.cfg.check_canaries else None
        if ev.kind == "full":
            rep = self.svc.defrag_pass(pin_map, None, sources=list(self.svc.subheaps), force=True)
        else:
            rep = self.svc.defrag_pass(pin_map, ev.budget)
        for hid, old, new in rep.moves:
            if hid in pin_map:
                raise PinnedMoveError(f"pinned handle id {hid} moved {old:#x} -> {new:#x}")
        if before is not None:
            after = self._canaries()
            if after != before:
                bad = sorted(h for h in before if after.get(h) != before[h])
                raise CanaryError(f"object contents changed across a barrier: ids {bad}")
        pins.barrier_end()
        if in_external:
            ctx.external_exit()
        self.counters.barriers += 1
        self.counters.moves += rep.moved_objects

    # execution --------------------------------------------------------------
    def call(self, fn: Function, args: Sequence[int]) -> Optional[int]:
        if len(args) != len(fn.params):
            raise ExecError(f"@{fn.name} expects {len(fn.params)} arguments, got {len(args)}")
        track = self.handle_mode and self._releases[fn.name]
        frame = _Frame(track)
        for p, a in zip(fn.params, args):
            frame.regs[p] = a & U64 if p.type == "ptr" else _s64(a)
        ctx = self.ctx
        if self.handle_mode:
            ctx.frame_push(fn.name, fn.pins or 0)
        try:
            ret = self._run(fn, frame)
        finally:
            if self.handle_mode:
                ctx.frame_pop()
        if track and frame.active:
            names = sorted(t.name for t in frame.active)
            raise UnbalancedPinError(f"@{fn.name} returned with unreleased pins {names}")
        return ret

    def _run(self, fn: Function, frame: _Frame) -> Optional[int]:
        regs = frame.regs
        prov = frame.prov
        c = self.counters
        limit = self.cfg.step_limit
        handle_mode = self.handle_mode
        module = self.module
        block = fn.entry
        prev = None

        def val(a):
            if a.__class__ is Const:
                return a.value & U64 if a.type == "ptr" else a.value
            return regs[a]

        while True:
            instrs = block.instrs
            k = 0
            # phis read their operands simultaneously
            if instrs[0].op == "phi":
                vals = []
                while instrs[k].op == "phi":
                    phi = instrs[k]
                    for v, p in zip(phi.args, phi.targets):
                        if p is prev:
                            vals.append((phi, val(v), prov.get(v)))
                            break
                    else:
                        raise ExecError(f"phi %{phi.name} has no incoming for {prev.label}")
                    k += 1
                for phi, v, pv in vals:
                    regs[phi] = v
                    if pv is None:
                        prov.pop(phi, None)
                    else:
                        prov[phi] = pv
                c.steps += len(vals)
            n = len(instrs)
            while k < n:
                i = instrs[k]
                k += 1
                c.steps += 1
                if c.steps > limit:
                    raise StepLimitError(f"step limit {limit} exceeded in @{fn.name}")
                op = i.op
                if op == "add":
                    regs[i] = _s64(val(i.args[0]) + val(i.args[1]))
                elif op == "sub":
                    regs[i] = _s64(val(i.args[0]) - val(i.args[1]))
                elif op == "mul":
                    regs[i] = _s64(val(i.args[0]) * val(i.args[1]))
                elif op in ("div", "rem"):
                    a, b = val(i.args[0]), val(i.args[1])
                    if b == 0:
                        raise ArithmeticFault(f"division by zero in @{fn.name}")
                    q = abs(a) // abs(b)
                    if (a < 0) != (b < 0):
                        q = -q
                    regs[i] = _s64(q) if op == "div" else _s64(a - q * b)
                elif op == "and":
                    regs[i] = _s64(val(i.args[0]) & val(i.args[1]))
                elif op == "or":
                    regs[i] = _s64(val(i.args[0]) | val(i.args[1]))
                elif op == "xor":
                    regs[i] = _s64(val(i.args[0]) ^ val(i.args[1]))
                elif op == "shl":
                    regs[i] = _s64(val(i.args[0]) << (val(i.args[1]) & 63))
                elif op == "shr":
                    regs[i] = _s64(val(i.args[0]) >> (val(i.args[1]) & 63))
                elif op == "lt":
                    regs[i] = int(val(i.args[0]) < val(i.args[1]))
                elif op == "le":
                    regs[i] = int(val(i.args[0]) <= val(i.args[1]))
                elif op == "gt":
                    regs[i] = int(val(i.args[0]) > val(i.args[1]))
                elif op == "ge":
                    regs[i] = int(val(i.args[0]) >= val(i.args[1]))
                elif op == "eq":
                    regs[i] = int(val(i.args[0]) == val(i.args[1]))
                elif op == "ne":
                    regs[i] = int(val(i.args[0]) != val(i.args[1]))
                elif op == "gep":
                    base = i.args[0]
                    regs[i] = (val(base) + val(i.args[1])) & U64
                    pv = prov.get(base)
                    if pv is not None:
                        prov[i] = pv
                elif op == "load":
                    a = i.args[0]
                    addr = val(a)
                    self._check_addr(addr, 8, frame, a)
                    raw = self.mem.read(addr, 8)
                    regs[i] = int.from_bytes(raw, "little", signed=i.mtype == "int")
                elif op == "store":
                    v, a = i.args
                    addr = val(a)
                    self._check_addr(addr, 8, frame, a)
                    x = val(v)
                    self.mem.write(addr, (x & U64).to_bytes(8, "little"))
                elif op == "translate":
                    self._translate(i, val(i.args[0]), frame)
                elif op == "release":
                    c.releases += 1
                    if frame.track:
                        t = i.args[0]
                        if t not in frame.active:
                            raise UnbalancedPinError(f"release of %{t.name} which is not pinned")
                        slot = frame.active.pop(t)
                        self.ctx.release(slot)
                elif op == "safepoint":
                    c.safepoints += 1
                    self._sync_point(False)
                elif op == "ptrtoint":
                    regs[i] = _s64(val(i.args[0]))
                elif op == "inttoptr":
                    regs[i] = val(i.args[0]) & U64
                elif op == "call":
                    args = [val(a) for a in i.args]
                    callee = i.callee
                    if callee in module.functions:
                        r = self.call(module.functions[callee], args)
                    elif module.is_external(callee):
                        if handle_mode:
                            self._sync_point(True)
                        r = self._external(callee, args, frame, i.args)
                    else:
                        r = self._builtin(callee, args)
                    if i.name is not None:
                        regs[i] = r if r is not None else 0
                elif op == "br":
                    prev, block = block, i.targets[0]
                    break
                elif op == "cbr":
                    prev = block
                    block = i.targets[0] if val(i.args[0]) else i.targets[1]
                    break
                elif op == "ret":
                    return val(i.args[0]) if i.args else None
                else:
                    raise ExecError(f"cannot execute {op}")

    def _translate(self, i: Instr, h: int, frame: _Frame) -> None:
        c = self.counters
        c.translates += 1
        if not self.handle_mode:
            frame.regs[i] = h
            return
        slot = i.slot
        if slot is not None:
            c.pins += 1
            if frame.track:
                if i in frame.active:
                    raise UnbalancedPinError(f"%{i.name} pinned twice without a release")
                for other, s in frame.active.items():
                    if s == slot:
                        raise SlotOverflowError(
                            f"slot {slot} shared by live translations %{other.name} and "
                            f"%{i.name}")
                frame.active[i] = slot
                k = len(frame.active)
                if k > c.max_pins:
                    c.max_pins = k
                fname = i.block.func.name
                if k > self.peak_pins.get(fname, 0):
                    self.peak_pins[fname] = k
            try:
                self.ctx.pin(slot, h)
            except PinSlotError as e:
                raise SlotOverflowError(str(e)) from None
        if h & HANDLE_TAG:
            ent = None
            hid = handle_id(h)
            if hid < self.rt.table.bump_next:
                ent = self.rt.table.entry(hid)
            if ent is None or not ent.active:
                frame.regs[i] = POISON | handle_offset(h)
                frame.prov.pop(i, None)
                return
            frame.regs[i] = ent.base + handle_offset(h)
            frame.prov[i] = (hid, ent.base)
        else:
            frame.regs[i] = h
            frame.prov.pop(i, None)


def run(program: Module, inputs: Sequence[int] = (), cfg: Optional[ExecConfig] = None,
        raise_errors: bool = False) -> Trace:
    """Execute ``program``'s entry function and collect its observable output."""
    cfg = cfg or ExecConfig()
    it = Interpreter(program, cfg)
    fn = program.functions.get(cfg.entry)
    if fn is None:
        raise ExecError(f"no entry function @{cfg.entry}")
    try:
        ret = it.call(fn, list(inputs))
    except ExecError as e:
        if raise_errors:
            raise
        return Trace(it.outputs, None, it.counters, it.assertions, str(e), e.kind,
                     it.peak_pins)
    return Trace(it.outputs, ret, it.counters, it.assertions, peak_pins=it.peak_pins)


# ---------------------------------------------------------------------------
# equivalence

@dataclass
class Divergence:
    schedule: Schedule
    minimized: Schedule
    expected: tuple
    got: tuple
    error: Optional[str] = None


@dataclass
class Verdict:
    equivalent: bool
    runs: int = 0
    divergences: List[Divergence] = field(default_factory=list)
    direct: Optional[Trace] = None
    handle: List[Trace] = field(default_factory=list)


def check_equivalence(original: Module, transformed: Module, inputs: Sequence[int] = (),
                      schedules: Sequence[Schedule] = (EMPTY_SCHEDULE,),
                      cfg: Optional[ExecConfig] = None) -> Verdict:
    """Compare direct execution of ``original`` with handle execution of ``transformed``."""
    base = cfg or ExecConfig()

    def handle_run(s: Schedule) -> Trace:
        c = ExecConfig(mode="handle", seed=base.seed, step_limit=base.step_limit,
                       schedule=s, entry=base.entry, span=base.span,
                       check_canaries=base.check_canaries)
        return run(transformed, inputs, c)

    d = run(original, inputs, ExecConfig(mode="direct", seed=base.seed,
                                         step_limit=base.step_limit, entry=base.entry))
    verdict = Verdict(True, 1, direct=d)
    want = d.observable()
    for s in schedules:
        t = handle_run(s)
        verdict.runs += 1
        verdict.handle.append(t)
        if t.observable() != want:
            verdict.equivalent = False
            verdict.divergences.append(
                Divergence(s, minimize_schedule(s, lambda x: handle_run(x).observable() != want),
                           want, t.observable(), t.error))
    return verdict


def minimize_schedule(s: Schedule, fails) -> Schedule:
    """Drop events one at a time while the failure persists."""
    cur = s
    k = 0
    while k < len(cur.events):
        trial = cur.without(k)
        if fails(trial):
            cur = trial
        else:
            k += 1
    return Schedule(cur.events, (s.name + ".min") if s.name else "min")
