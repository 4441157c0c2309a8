"""Pause-time study.

Several mutators share one heap.  At a fixed interval a barrier is forced
and a partial pass with a fixed byte budget runs.  Each operation pins the
object it works on and reaches a safepoint at the end of every segment, so a
barrier has to wait for each mutator to finish its current segment.

The default mode runs on the virtual clock: the pause is the rendezvous wait
plus the modelled pass cost.  ``threaded=True`` runs real threads and
reports wall-clock pauses instead.
"""

from __future__ import annotations

import heapq
import random
import statistics
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from ..anchorage import Anchorage
from ..runtime import Runtime
from .experiment import CostModel

MIB = 1 << 20


class PinViolation(AssertionError):
    pass


@dataclass(frozen=True)
class PauseSpec:
    mutators: int = 1
    live_bytes: int = 8 * MIB
    obj_size: Tuple[int, int] = (64, 1024)
    ops_total: int = 40000  # shared among the mutators
    load: float = 0.8  # offered load as a fraction of one mutator's capacity
    pause_interval: Optional[float] = 0.002  # seconds; None disables pauses
    budget: int = 1 * MIB
    churn: float = 0.3  # fraction of operations that replace an object
    op_ns: float = 4000.0
    segments: int = 4  # safepoints per operation
    seed: int = 0
    span: int = 1 * MIB

    def __post_init__(self):
        if self.mutators < 1:
            raise ValueError("need at least one mutator")
        if not 0 < self.load <= 1:
            raise ValueError("load must be in (0, 1]")
        if self.segments < 1:
            raise ValueError("segments must be >= 1")
        if self.pause_interval is not None and self.pause_interval <= 0:
            raise ValueError("pause interval must be positive")


@dataclass
class PauseSample:
    index: int
    mutators: int
    pause_ms: float
    rendezvous_ms: float
    moved_bytes: int
    moved_objects: int
    pinned_skipped: int


@dataclass
class PauseResult:
    spec: PauseSpec
    pauses: List[PauseSample] = field(default_factory=list)
    latencies_us: List[float] = field(default_factory=list)
    wall_pause_ms: List[float] = field(default_factory=list)

    @property
    def mean_pause_ms(self) -> float:
        return statistics.fmean(p.pause_ms for p in self.pauses) if self.pauses else 0.0

    def latency_csv(self) -> str:
        lines = ["mutators,op,latency_us"]
        lines += [f"{self.spec.mutators},{i},{v:.3f}" for i, v in enumerate(self.latencies_us)]
        return "\n".join(lines) + "\n"

    def pause_csv(self) -> str:
        lines = ["index,mutators,pause_ms,rendezvous_ms,moved_bytes,moved_objects,pinned_skipped"]
        lines += [f"{p.index},{p.mutators},{p.pause_ms:.6f},{p.rendezvous_ms:.6f},"
                  f"{p.moved_bytes},{p.moved_objects},{p.pinned_skipped}" for p in self.pauses]
        return "\n".join(lines) + "\n"


def _content(key: int, size: int) -> bytes:
    seed = key.to_bytes(8, "little")
    return (seed * (size // 8 + 1))[:size]


class _Shared:
    """Heap, runtime and per-mutator object sets."""

    def __init__(self, spec: PauseSpec) -> None:
        self.spec = spec
        self.heap = Anchorage(span=spec.span, track_contents=True, record_moves=True)
        self.rt = Runtime(self.heap, check_bounds=True)
        self.lock = threading.Lock()
        self.crc: Dict[int, int] = {}  # handle -> checksum of contents
        self.next_key = 0

    def new_object(self, rng: random.Random) -> int:
        lo, hi = self.spec.obj_size
        size = rng.randint(lo, hi)
        with self.lock:
            self.next_key += 1
            data = _content(self.next_key, size)
            h = self.rt.halloc(size)
            self.heap.write(self.rt.translate(h), data)
        self.crc[h] = zlib.crc32(data)
        return h

    def drop(self, h: int) -> None:
        with self.lock:
            self.rt.hfree(h)
        del self.crc[h]

    def check(self, h: int) -> None:
        with self.lock:
            addr = self.rt.translate(h)
            data = self.heap.read(addr, self.rt.size_of(h))
        if zlib.crc32(data) != self.crc[h]:
            raise PinViolation(f"object {h:#x} contents changed")

    def populate(self, rng: random.Random) -> List[List[int]]:
        n = self.spec.mutators
        objs: List[List[int]] = [[] for _ in range(n)]
        per = self.spec.live_bytes // n
        for m in range(n):
            used = 0
            while used < per:
                h = self.new_object(rng)
                objs[m].append(h)
                used += self.rt.size_of(h)
        return objs

    def defrag(self, pin_map) -> "object":
        rep = self.heap.defrag_pass(pin_map, self.spec.budget, force=True)
        moved = {hid for hid, _, _ in rep.moves}
        bad = moved & set(pin_map)
        if bad:
            raise PinViolation(f"pinned objects moved: {sorted(bad)[:5]}")
        return rep


def run_pause_study(spec: PauseSpec, cost: CostModel = CostModel(),
                    threaded: bool = False) -> PauseResult:
    if threaded:
        return _run_threaded(spec)
    return _run_simulated(spec, cost)


def _run_simulated(spec: PauseSpec, cost: CostModel) -> PauseResult:
    res = PauseResult(spec)
    sh = _Shared(spec)
    objs = sh.populate(random.Random(spec.seed))
    n = spec.mutators
    rngs = [random.Random((spec.seed << 8) ^ m) for m in range(n)]
    ctxs = []
    for m in range(n):
        ctx = sh.rt.new_mutator(f"m{m}")
        ctx.frame_push("op", 1)
        ctxs.append(ctx)
    op_s = spec.op_ns * 1e-9
    # offered load is fixed, so each mutator idles more as the count grows
    mean_gap = op_s * (n / spec.load - 1)
    quota = [spec.ops_total // n + (1 if m < spec.ops_total % n else 0) for m in range(n)]

    # in-flight operation: [arrival, start, duration, handle, kind, index]
    cur: List[Optional[list]] = [None] * n
    arrival = [0.0] * n
    events: List[Tuple[float, int, int, str]] = []  # (time, seq, mutator, kind)
    seq = 0

    def push(t: float, m: int, kind: str) -> None:
        nonlocal seq
        seq += 1
        heapq.heappush(events, (t, seq, m, kind))

    def gap(m: int) -> float:
        return rngs[m].expovariate(1 / mean_gap) if mean_gap > 0 else 0.0

    def begin(m: int, t: float) -> None:
        rng = rngs[m]
        d = op_s * rng.uniform(0.5, 1.5)
        kind = "replace" if rng.random() < spec.churn else "read"
        i = rng.randrange(len(objs[m]))
        h = objs[m][i]
        if kind == "read":
            ctxs[m].pin(0, h)
        cur[m] = [arrival[m], t, d, h, kind, i]
        push(t + d, m, "end")

    def finish(m: int, t: float) -> float:
        arr, _, _, h, kind, i = cur[m]
        if kind == "read":
            sh.check(h)
            ctxs[m].release(0)
        else:
            sh.drop(h)
            objs[m][i] = sh.new_object(rngs[m])
        cur[m] = None
        return (t - arr) * 1e6

    for m in range(n):
        if quota[m]:
            arrival[m] = gap(m)
            push(arrival[m], m, "arrive")
    done = [0] * n
    next_pause = spec.pause_interval if spec.pause_interval is not None else float("inf")
    while events:
        t_ev, _, m, kind = events[0]
        if next_pause <= t_ev:
            t = next_pause
            # busy mutators park at their next segment boundary; idle ones
            # are already at a safepoint
            wait = 0.0
            for op in cur:
                if op is None:
                    continue
                t0, d = op[1], op[2]
                seg = d / spec.segments
                k = int((t - t0) / seg) + 1
                wait = max(wait, min(t0 + k * seg, t0 + d) - t)
            sh.rt.pins.request()
            for ctx in ctxs:
                ctx.poll()
            pin_map = sh.rt.stop_the_world()
            rep = sh.defrag(pin_map)
            sh.rt.resume_the_world()
            pause = wait + cost.report_seconds(rep)
            res.pauses.append(PauseSample(len(res.pauses), n, pause * 1e3, wait * 1e3,
                                          rep.moved_bytes, rep.moved_objects,
                                          rep.skipped_pinned))
            res.wall_pause_ms.append(rep.duration * 1e3)
            resume = t + pause
            shifted = []
            for e, s2, j, k2 in events:
                if k2 == "end":
                    # the operation was stopped for the whole pause
                    cur[j][2] += pause
                    shifted.append((e + pause, s2, j, k2))
                else:
                    # requests arriving during the pause wait for it to end
                    shifted.append((max(e, resume), s2, j, k2))
            heapq.heapify(shifted)
            events[:] = shifted
            next_pause = resume + spec.pause_interval
            continue
        heapq.heappop(events)
        if kind == "arrive":
            begin(m, t_ev)
            continue
        res.latencies_us.append(finish(m, t_ev))
        done[m] += 1
        if done[m] < quota[m]:
            arrival[m] = t_ev + gap(m)
            push(arrival[m], m, "arrive")
    for ctx in ctxs:
        ctx.frame_pop()
    return res


def _run_threaded(spec: PauseSpec) -> PauseResult:
    """Real threads; pauses are wall-clock barrier durations."""
    res = PauseResult(spec)
    sh = _Shared(spec)
    objs = sh.populate(random.Random(spec.seed))
    sh.rt.pins.threaded = True
    stop = threading.Event()
    errors: List[BaseException] = []
    lat: List[List[float]] = [[] for _ in range(spec.mutators)]

    def mutator(m: int) -> None:
        rng = random.Random((spec.seed << 8) ^ m)
        ctx = sh.rt.new_mutator(f"m{m}")
        ctx.frame_push("op", 1)
        try:
            for _ in range(spec.ops_total // spec.mutators):
                t0 = time.perf_counter()
                i = rng.randrange(len(objs[m]))
                h = objs[m][i]
                if rng.random() < spec.churn:
                    sh.drop(h)
                    objs[m][i] = sh.new_object(rng)
                    ctx.poll()
                else:
                    ctx.pin(0, h)
                    for _ in range(spec.segments):
                        sh.check(h)
                        time.sleep(0)  # let other threads run
                        ctx.poll()
                    ctx.release(0)
                lat[m].append((time.perf_counter() - t0) * 1e6)
                ctx.poll()
        except BaseException as e:  # surfaced to the caller
            errors.append(e)
        finally:
            ctx.frame_pop()
            sh.rt.pins.unregister(ctx)

    def collector() -> None:
        try:
            while not stop.is_set():
                time.sleep(spec.pause_interval)
                if stop.is_set():
                    break
                sh.rt.pins.request()
                pin_map = sh.rt.pins.barrier_begin(timeout=10.0)
                rep = sh.defrag(pin_map)
                rec = sh.rt.pins.barrier_end()
                res.pauses.append(PauseSample(len(res.pauses), spec.mutators,
                                              rec.duration * 1e3, 0.0, rep.moved_bytes,
                                              rep.moved_objects, rep.skipped_pinned))
                res.wall_pause_ms.append(rec.duration * 1e3)
        except BaseException as e:
            errors.append(e)

    threads = [threading.Thread(target=mutator, args=(m,)) for m in range(spec.mutators)]
    col = threading.Thread(target=collector) if spec.pause_interval else None
    for t in threads:
        t.start()
    if col is not None:
        col.start()
    for t in threads:
        t.join()
    stop.set()
    if col is not None:
        col.join()
    if errors:
        raise errors[0]
    for m in range(spec.mutators):
        res.latencies_us.extend(lat[m])
    return res


@dataclass
class StudySummary:
    results: List[PauseResult]
    rho: float
    p_value: float
    rho_of_means: float

    def csv(self) -> str:
        lines = ["mutators,pauses,mean_pause_ms,max_pause_ms,mean_latency_us,p99_latency_us"]
        for r in self.results:
            lat = sorted(r.latencies_us)
            p99 = lat[min(len(lat) - 1, int(0.99 * len(lat)))] if lat else 0.0
            mx = max((p.pause_ms for p in r.pauses), default=0.0)
            lines.append(f"{r.spec.mutators},{len(r.pauses)},{r.mean_pause_ms:.6f},{mx:.6f},"
                         f"{statistics.fmean(lat) if lat else 0.0:.3f},{p99:.3f}")
        return "\n".join(lines) + "\n"


def mutator_trend(results: Sequence[PauseResult]) -> StudySummary:
    """Rank correlation between mutator count and pause duration.

    ``rho`` is computed over individual pauses; ``rho_of_means`` over the
    per-count means, which with four counts only takes a handful of values.
    """
    from scipy.stats import spearmanr

    xs, ys = [], []
    for r in results:
        for p in r.pauses:
            xs.append(r.spec.mutators)
            ys.append(p.pause_ms)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        rho, pv = 0.0, 1.0
    else:
        rho, pv = spearmanr(xs, ys)
    means = [r.mean_pause_ms for r in results]
    counts = [r.spec.mutators for r in results]
    rm = spearmanr(counts, means)[0] if len(set(means)) > 1 else 0.0
    return StudySummary(list(results), float(rho), float(pv), float(rm))


def run_mutator_sweep(base: PauseSpec, counts: Sequence[int] = (1, 2, 4, 8),
                      cost: CostModel = CostModel(), threaded: bool = False) -> StudySummary:
    results = []
    for n in counts:
        spec = PauseSpec(**{**base.__dict__, "mutators": n})
        results.append(run_pause_study(spec, cost, threaded))
    return mutator_trend(results)
