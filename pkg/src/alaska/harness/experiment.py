"""Virtual-time experiments driving the allocator and the controller.

Mutator operations and defragmentation passes advance a virtual clock using
a fixed cost model, so runs are reproducible byte for byte.  A pass stops the
world; its modelled duration is added to the clock and to the pause total.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from ..anchorage import Anchorage, MoveReport
from ..control import (ControlParams, ControlState, Controller, Mode, RunPartialPass,
                       VirtualClock, record_pass)
from ..handles import handle_id
from ..runtime import Runtime
from .workloads import WorkloadSpec, ops

CSV_HEADER = "tick,live,extent,resident,frag,mode,pause_ms,moves"


@dataclass(frozen=True)
class CostModel:
    """Modelled durations in nanoseconds."""

    op_ns: float = 20_000.0
    per_object_ns: float = 1000.0
    per_byte_ns: float = 1.0
    pass_fixed_ns: float = 50_000.0

    def pass_seconds(self, moved_objects: int, moved_bytes: int) -> float:
        return (self.pass_fixed_ns + self.per_object_ns * moved_objects
                + self.per_byte_ns * moved_bytes) * 1e-9

    def report_seconds(self, rep: MoveReport) -> float:
        return self.pass_seconds(rep.moved_objects, rep.moved_bytes)


@dataclass
class MetricSample:
    tick: int
    live: int
    extent: int
    resident: int
    frag: float
    mode: str
    pause_ms: float
    moves: int

    def row(self) -> List[str]:
        return [str(self.tick), str(self.live), str(self.extent), str(self.resident),
                f"{self.frag:.6f}", self.mode, f"{self.pause_ms:.3f}", str(self.moves)]


@dataclass
class PassRecord:
    start: float
    duration: float
    budget: int
    moved_bytes: int
    moved_objects: int
    skipped_pinned: int
    frag_before: float
    frag_after: float
    extent_before: int
    sleep_after: float = 0.0


@dataclass
class ExperimentResult:
    spec: WorkloadSpec
    params: Optional[ControlParams]
    sample_interval: float
    samples: List[MetricSample] = field(default_factory=list)
    passes: List[PassRecord] = field(default_factory=list)
    waiting_ticks: List[float] = field(default_factory=list)
    trace: list = field(default_factory=list)
    episodes: List[Tuple[float, float]] = field(default_factory=list)  # (frag at start, f_ub)
    load_end: float = 0.0
    control_start: float = 0.0
    end_time: float = 0.0
    pause_total: float = 0.0

    # summaries ------------------------------------------------------------
    @property
    def peak_frag(self) -> float:
        return max((s.frag for s in self.samples), default=1.0)

    @property
    def peak_resident(self) -> int:
        return max((s.resident for s in self.samples), default=0)

    @property
    def final(self) -> MetricSample:
        return self.samples[-1]

    def overhead(self) -> float:
        span = self.end_time - self.control_start
        return self.pause_total / span if span > 0 else 0.0

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER.split(","))
        for s in self.samples:
            w.writerow(s.row())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as f:
                f.write(self.csv_text())
        except OSError as e:
            raise OSError(f"cannot write metrics to {path}: {e.strerror}") from e

    def trace_csv(self) -> str:
        lines = ["time,mode,frag,action,value"]
        lines += [r.csv() for r in self.trace]
        return "\n".join(lines) + "\n"


def run_experiment(spec: WorkloadSpec, params: Optional[ControlParams] = None,
                   cost: CostModel = CostModel(), sample_interval: float = 0.1,
                   control_start: Optional[float] = None,
                   on_pass: Optional[Callable[[PassRecord], None]] = None,
                   timing: str = "model") -> ExperimentResult:
    """Replay ``spec`` against a fresh heap, with the controller if ``params``.

    The controller first wakes at ``control_start`` (default: immediately).
    A negative value means "when the churn phase ends".  With ``timing`` set
    to ``"measured"`` a pass costs its real wall-clock duration instead of the
    modelled one; runs are then no longer reproducible.
    """
    if timing not in ("model", "measured"):
        raise ValueError(f"timing must be 'model' or 'measured', got {timing!r}")
    clock = VirtualClock()
    heap = Anchorage(span=spec.span)
    rt = Runtime(heap, check_bounds=False)
    res = ExperimentResult(spec, params, sample_interval)
    after_load = control_start is not None and control_start < 0
    start = 0.0 if control_start is None or after_load else control_start
    ctrl = None
    if params is not None:
        ctrl = Controller(params, clock, ControlState(start_time=start, next_wake=start))
        if after_load:
            ctrl.state.next_wake = float("inf")
    res.control_start = start
    pinned = set()
    prng = random.Random(spec.seed ^ 0x5EED)
    handles: Dict[int, int] = {}
    op_s = cost.op_ns * 1e-9
    state = {"moves": 0, "next_sample": 0.0, "tick": 0}

    def mode() -> str:
        if ctrl is None:
            return "off"
        return ctrl.state.mode.value

    def sample_until(t: float) -> None:
        while state["next_sample"] <= t:
            st = heap.stats()
            res.samples.append(MetricSample(state["tick"], st.live_bytes, st.extent_bytes,
                                            st.resident_bytes, st.frag_ratio, mode(),
                                            res.pause_total * 1e3, state["moves"]))
            state["tick"] += 1
            state["next_sample"] = state["tick"] * sample_interval

    def service() -> None:
        if ctrl is None:
            return
        while clock.now >= ctrl.state.next_wake:
            st = heap.stats()
            if ctrl.state.mode is Mode.WAITING:
                res.waiting_ticks.append(clock.now)
            was_waiting = ctrl.state.mode is Mode.WAITING
            act = ctrl.tick(st.frag_ratio, st.extent_bytes)
            if not isinstance(act, RunPartialPass):
                if res.passes and res.passes[-1].sleep_after == 0.0 and not was_waiting:
                    res.passes[-1].sleep_after = act.duration
                break
            if was_waiting:
                res.episodes.append((st.frag_ratio, ctrl.params.f_ub))
            rep = heap.defrag_pass(pinned, act.budget_bytes)
            dur = cost.report_seconds(rep) if timing == "model" else rep.duration
            after = heap.stats()
            rec = PassRecord(clock.now, dur, act.budget_bytes, rep.moved_bytes,
                             rep.moved_objects, rep.skipped_pinned, st.frag_ratio,
                             after.frag_ratio, st.extent_bytes)
            res.passes.append(rec)
            state["moves"] += rep.moved_objects
            res.pause_total += dur
            sample_until(clock.now)
            clock.advance(dur)
            record_pass(ctrl.state, dur, rep.moved_bytes)
            if on_pass is not None:
                on_pass(rec)

    for op in ops(spec):
        kind = op[0]
        if kind == "idle":
            if after_load and ctrl is not None:
                ctrl.state.next_wake = ctrl.state.start_time = res.control_start = clock.now
            res.load_end = clock.now
            end = clock.now + op[1]
            while True:
                sample_until(clock.now)
                service()
                nxt = min(end, state["next_sample"],
                          ctrl.state.next_wake if ctrl is not None else end)
                if nxt >= end:
                    clock.advance_to(end)
                    break
                clock.advance_to(nxt)
            continue
        sample_until(clock.now)
        if kind == "alloc":
            h = rt.halloc(op[2])
            handles[op[1]] = h
            if spec.pinned_fraction and prng.random() < spec.pinned_fraction:
                pinned.add(handle_id(h))
        elif kind == "free":
            h = handles.pop(op[1])
            pinned.discard(handle_id(h))
            rt.hfree(h)
        clock.advance(op_s)
        service()
    if not res.load_end:
        res.load_end = clock.now
    sample_until(clock.now)
    res.end_time = clock.now
    if ctrl is not None:
        res.trace = ctrl.trace
    return res


# ---------------------------------------------------------------------------
# post-run checks

def max_window_overhead(res: ExperimentResult, min_window: float) -> float:
    """Worst defragmentation time fraction over windows between waiting wake-ups.

    Only windows at least ``min_window`` long are considered.
    """
    import numpy as np

    ticks = np.asarray(sorted(set(res.waiting_ticks)), dtype=float)
    if len(ticks) < 2 or not res.passes:
        return 0.0
    starts = np.asarray([p.start for p in res.passes])
    durs = np.asarray([p.duration for p in res.passes])
    cum = np.concatenate([[0.0], np.cumsum(durs)])
    # defrag time of passes starting in [t_i, t_j)
    idx = np.searchsorted(starts, ticks, side="left")
    d_at = cum[idx]
    worst = 0.0
    for i in range(len(ticks) - 1):
        span = ticks[i + 1:] - ticks[i]
        ok = span >= min_window
        if not ok.any():
            continue
        frac = (d_at[i + 1:][ok] - d_at[i]) / span[ok]
        worst = max(worst, float(frac.max()))
    return worst


def hysteresis_violations(res: ExperimentResult) -> int:
    """Episodes that began without fragmentation above the upper bound."""
    return sum(1 for frag, f_ub in res.episodes if not frag > f_ub)


def random_params(rng: random.Random) -> ControlParams:
    f_lb = rng.uniform(1.05, 1.6)
    f_ub = f_lb + rng.uniform(0.1, 1.0)
    o_ub = rng.uniform(0.01, 0.3)
    o_lb = rng.uniform(0.0, o_ub)
    alpha = rng.uniform(0.02, 1.0)
    poll = rng.choice((0.05, 0.1, 0.25, 0.5))
    return ControlParams(f_lb, f_ub, o_lb, o_ub, alpha, poll)


@dataclass
class SweepRow:
    params: ControlParams
    max_window_overhead: float
    overall_overhead: float
    passes: int
    hysteresis_violations: int
    final_frag: float

    HEADER = ("f_lb,f_ub,o_lb,o_ub,alpha,poll_s,passes,max_window_overhead,"
              "overall_overhead,hysteresis_violations,final_frag")

    def csv(self) -> str:
        p = self.params
        return (f"{p.f_lb:.4f},{p.f_ub:.4f},{p.o_lb:.4f},{p.o_ub:.4f},{p.alpha:.4f},"
                f"{p.poll_interval:.3f},{self.passes},{self.max_window_overhead:.6f},"
                f"{self.overall_overhead:.6f},{self.hysteresis_violations},{self.final_frag:.4f}")


def run_sweep(spec: WorkloadSpec, count: int, seed: int = 0,
              cost: CostModel = CostModel(), window_polls: int = 10) -> List[SweepRow]:
    rng = random.Random(seed)
    rows = []
    for _ in range(count):
        p = random_params(rng)
        res = run_experiment(spec, p, cost, sample_interval=max(p.poll_interval, 0.1))
        rows.append(SweepRow(p, max_window_overhead(res, window_polls * p.poll_interval),
                             res.overhead(), len(res.passes), hysteresis_violations(res),
                             res.final.frag))
    return rows


def sleeps_after_passes(res: ExperimentResult) -> List[float]:
    return [p.sleep_after for p in res.passes]


def mispredict_passes(res: ExperimentResult, factor: float = 20.0) -> List[PassRecord]:
    """Passes whose computed back-off is at least ``factor`` poll intervals."""
    poll = res.params.poll_interval
    return [p for p in res.passes
            if p.duration / res.params.o_ub >= factor * poll]


def describe(res: ExperimentResult) -> Dict[str, float]:
    return {
        "peak_frag": res.peak_frag,
        "peak_resident": res.peak_resident,
        "final_resident": res.final.resident,
        "final_frag": res.final.frag,
        "passes": len(res.passes),
        "pause_ms": res.pause_total * 1e3,
        "overhead": res.overhead(),
        "moves": res.final.moves,
    }


def compare_runs(runs: Sequence[ExperimentResult]) -> str:
    out = ["label,peak_frag,peak_resident,final_resident,final_frag,passes,pause_ms"]
    for r in runs:
        d = describe(r)
        out.append(f"{'on' if r.params else 'off'},{d['peak_frag']:.4f},{d['peak_resident']},"
                   f"{d['final_resident']},{d['final_frag']:.4f},{d['passes']},{d['pause_ms']:.3f}")
    return "\n".join(out) + "\n"
