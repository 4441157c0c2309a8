"""Command-line entry points: ``alaska-pass``, ``alaska-run`` and ``alaska-bench``."""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .ir.core import IRError

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kb": 1000, "kib": 1 << 10, "m": 1 << 20,
          "mb": 1000 ** 2, "mib": 1 << 20, "g": 1 << 30, "gb": 1000 ** 3, "gib": 1 << 30}


def parse_size(text: str) -> int:
    """``"10MiB"`` -> 10485760.  Bare numbers are bytes."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r} (try 500, 64KiB, 10MiB)")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def parse_obj_size(text: str):
    """``"500"`` or a range ``"64-1024"``."""
    if "-" in text:
        lo, hi = text.split("-", 1)
        return parse_size(lo), parse_size(hi)
    return parse_size(text)


def _read(path: str) -> str:
    try:
        return sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as e:
        raise SystemExit(f"error: cannot read {path}: {e.strerror}")


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise SystemExit(f"error: cannot write {path}: {e.strerror}")


# ---------------------------------------------------------------------------
# alaska-pass

def pass_main(argv: Optional[Sequence[str]] = None) -> int:
    from .ir.text import format_module, parse_module
    from .passes import PassError, PassOptions, transform

    ap = argparse.ArgumentParser(prog="alaska-pass",
                                 description="Insert handle translations, pins and safepoints.")
    ap.add_argument("--input", "-i", required=True, help="input .tir file, or - for stdin")
    ap.add_argument("--output", "-o", default="-", help="output file (default stdout)")
    ap.add_argument("--no-hoist", action="store_true", help="translate before every access")
    ap.add_argument("--no-tracking", action="store_true", help="omit pin slots and safepoints")
    ap.add_argument("--keep-releases", action="store_true", help="leave release markers in")
    ap.add_argument("--stats", action="store_true", help="print per-function plan to stderr")
    a = ap.parse_args(argv)
    try:
        m = parse_module(_read(a.input))
        res = transform(m, PassOptions(hoist=not a.no_hoist, tracking=not a.no_tracking,
                                       keep_releases=a.keep_releases))
    except (IRError, PassError) as e:
        print(f"error: {a.input}: {e}", file=sys.stderr)
        return 1
    _write(a.output, format_module(m))
    if a.stats:
        for name, plan in res.plans.items():
            print(f"@{name}: translates={len(plan.trees)} hoisted={plan.hoisted} "
                  f"escapes={len(plan.escapes)} slots={res.slots[name].slot_count}",
                  file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# alaska-run

def run_main(argv: Optional[Sequence[str]] = None) -> int:
    from .interp import Counters, ExecConfig, Schedule, run
    from .ir.text import parse_module
    from .passes import PassError, PassOptions, transform

    ap = argparse.ArgumentParser(prog="alaska-run", description="Interpret a .tir program.")
    ap.add_argument("--program", "-p", required=True)
    ap.add_argument("--mode", choices=("direct", "handle"), default="direct")
    ap.add_argument("--schedule", help="JSON barrier schedule (handle mode)")
    ap.add_argument("--counters", help="write dynamic counters to this CSV file")
    ap.add_argument("--transform", action="store_true",
                    help="run the pass first (handle mode expects pass output)")
    ap.add_argument("--entry", default="main")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--step-limit", type=int, default=2_000_000)
    ap.add_argument("args", nargs="*", type=int, help="integer arguments to the entry function")
    a = ap.parse_args(argv)
    try:
        m = parse_module(_read(a.program))
        if a.transform:
            transform(m, PassOptions())
    except (IRError, PassError) as e:
        print(f"error: {a.program}: {e}", file=sys.stderr)
        return 1
    sched = None
    if a.schedule:
        if a.mode != "handle":
            print("error: --schedule needs --mode handle", file=sys.stderr)
            return 2
        try:
            sched = Schedule.from_json(_read(a.schedule))
        except (ValueError, KeyError) as e:
            print(f"error: {a.schedule}: bad schedule: {e}", file=sys.stderr)
            return 1
    tr = run(m, a.args, ExecConfig(mode=a.mode, seed=a.seed, step_limit=a.step_limit,
                                   schedule=sched, entry=a.entry))
    for v in tr.outputs:
        print(f"out {v}")
    if tr.error is not None:
        print(f"error[{tr.error_kind}]: {tr.error}", file=sys.stderr)
    else:
        print(f"ret {tr.ret}")
    if a.counters:
        _write(a.counters, Counters.HEADER + "\n" + tr.counters.csv_row() + "\n")
    return 0 if tr.error is None else 3


# ---------------------------------------------------------------------------
# alaska-bench

def _bench_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="alaska-bench",
        description="Fragmentation experiments on the modelled heap.",
        epilog="studies: 'run' compares a baseline with the controller; 'sweep' checks the "
               "overhead envelope over random parameters; 'large' is the large-heap "
               "back-off run; 'pause' measures pauses against mutator count.")
    ap.add_argument("--study", choices=("run", "sweep", "large", "pause"), default="run")
    ap.add_argument("--workload", choices=("lru-churn", "uniform-random", "ramp"),
                    default="lru-churn")
    ap.add_argument("--live-cap", type=parse_size, default=10 << 20)
    ap.add_argument("--obj-size", type=parse_obj_size, default=500,
                    help="bytes, or a range like 64-1024")
    ap.add_argument("--insert", type=parse_size, help="bytes inserted (default 3x live cap)")
    ap.add_argument("--get-ratio", type=float, default=1.0)
    ap.add_argument("--idle", type=float, default=30.0, help="quiet seconds after the churn")
    ap.add_argument("--pinned-fraction", type=float, default=0.0)
    ap.add_argument("--span", type=parse_size, default=1 << 20, help="sub-heap span")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--f-ub", type=float, default=1.5)
    ap.add_argument("--f-lb", type=float, default=1.2)
    ap.add_argument("--o-ub", type=float, default=0.05)
    ap.add_argument("--o-lb", type=float, default=0.01)
    ap.add_argument("--alpha", type=float, default=0.25)
    ap.add_argument("--poll-interval-ms", type=float, default=500.0)
    ap.add_argument("--sample-interval", type=float, default=0.1, help="seconds between samples")
    ap.add_argument("--out", default="run.csv")
    ap.add_argument("--no-control", action="store_true", help="baseline only")
    ap.add_argument("--no-baseline", action="store_true", help="controller run only")
    ap.add_argument("--defrag-after-load", action="store_true",
                    help="controller starts when the churn ends")
    ap.add_argument("--timing", choices=("model", "measured"), default="model",
                    help="pass cost from the cost model or from wall-clock time")
    ap.add_argument("--trace", action="store_true", help="also write controller and pass traces")
    ap.add_argument("--no-plot", dest="plot", action="store_false", help="skip PNG output")
    ap.add_argument("--runs", type=int, default=50, help="parameter sets (sweep)")
    ap.add_argument("--mutators", default="1,2,4,8", help="mutator counts (pause)")
    ap.add_argument("--pause-interval-ms", type=float, default=2.0)
    ap.add_argument("--budget", type=parse_size, default=1 << 20, help="bytes per pause")
    ap.add_argument("--ops", type=int, default=40000, help="operations per pause run")
    ap.add_argument("--threaded", action="store_true", help="real threads (pause)")
    return ap


def bench_main(argv: Optional[Sequence[str]] = None) -> int:
    from .control import ConfigError, ControlParams
    from .harness import report
    from .harness.experiment import describe, mispredict_passes, run_experiment, run_sweep
    from .harness.pause import PauseSpec, run_mutator_sweep
    from .harness.workloads import WorkloadSpec

    ap = _bench_parser()
    a = ap.parse_args(argv)
    out = Path(a.out)
    try:
        params = ControlParams(a.f_lb, a.f_ub, a.o_lb, a.o_ub, a.alpha,
                               a.poll_interval_ms / 1000.0)
        spec = WorkloadSpec(kind=a.workload.replace("-", "_"), live_cap_bytes=a.live_cap,
                            obj_size=a.obj_size, insert_bytes=a.insert, get_ratio=a.get_ratio,
                            seed=a.seed, idle_seconds=a.idle,
                            pinned_fraction=a.pinned_fraction, span=a.span)
    except (ConfigError, ValueError) as e:
        ap.error(str(e))
    written: List[Path] = []
    try:
        if a.study == "run":
            runs = {}
            if not a.no_baseline:
                runs["baseline"] = run_experiment(spec, None, sample_interval=a.sample_interval)
            if not a.no_control:
                runs["control"] = run_experiment(
                    spec, params, sample_interval=a.sample_interval,
                    control_start=-1 if a.defrag_after_load else None, timing=a.timing)
            if not runs:
                ap.error("--no-control and --no-baseline leave nothing to run")
            written += report.write_memory_report(out, runs, a.plot)
            for label, r in runs.items():
                d = describe(r)
                print(f"{label}: peak_frag={d['peak_frag']:.3f} "
                      f"peak_resident={d['peak_resident'] / 2**20:.2f}MiB "
                      f"final_resident={d['final_resident'] / 2**20:.2f}MiB "
                      f"final_frag={d['final_frag']:.3f} passes={d['passes']} "
                      f"pause_ms={d['pause_ms']:.1f}")
            if a.trace and "control" in runs:
                written += report.write_trace(out, runs["control"], a.plot)
        elif a.study == "sweep":
            rows = run_sweep(spec, a.runs, a.seed)
            written += report.write_sweep_report(out, rows, a.plot)
            worst = max(r.max_window_overhead / r.params.o_ub for r in rows)
            print(f"sweep: {len(rows)} runs, worst window overhead / O_ub = {worst:.3f}, "
                  f"hysteresis violations = {sum(r.hysteresis_violations for r in rows)}")
        elif a.study == "large":
            r = run_experiment(spec, params, sample_interval=a.sample_interval,
                               control_start=-1 if a.defrag_after_load else None,
                               timing=a.timing)
            written += report.write_memory_report(out, {"control": r}, a.plot)
            written += report.write_trace(out, r, a.plot)
            mp = mispredict_passes(r)
            print(f"large: passes={len(r.passes)} mispredicts={len(mp)} "
                  f"max_sleep={max((p.sleep_after for p in r.passes), default=0):.2f}s "
                  f"final_frag={r.final.frag:.3f}")
        else:
            counts = tuple(int(x) for x in a.mutators.split(","))
            base = PauseSpec(live_bytes=a.live_cap, obj_size=a.obj_size
                             if isinstance(a.obj_size, tuple) else (a.obj_size, a.obj_size),
                             ops_total=a.ops, pause_interval=a.pause_interval_ms / 1000.0,
                             budget=a.budget, seed=a.seed, span=a.span)
            summary = run_mutator_sweep(base, counts, threaded=a.threaded)
            written += report.write_pause_report(out, summary, a.plot)
            for r in summary.results:
                print(f"mutators={r.spec.mutators}: pauses={len(r.pauses)} "
                      f"mean_pause={r.mean_pause_ms:.3f}ms")
            print(f"spearman rho={summary.rho:.3f} (p={summary.p_value:.3f})")
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for p in written:
        print(f"wrote {p}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(bench_main())
