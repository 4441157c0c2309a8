import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from alaska.control import ControlParams
from alaska.harness.experiment import (CSV_HEADER, CostModel, hysteresis_violations,
                                       max_window_overhead, run_experiment, run_sweep)
from alaska.harness.pause import PauseSpec, mutator_trend, run_pause_study
from alaska.harness.workloads import KINDS, WorkloadSpec, charged, ops

DATA = Path(__file__).parent / "data"
SMALL = WorkloadSpec(live_cap_bytes=256 << 10, obj_size=(32, 600), insert_bytes=1 << 20,
                     seed=3, idle_seconds=5.0, get_ratio=0.5)


# workloads ----------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_workload_deterministic(kind):
    spec = WorkloadSpec(kind=kind, live_cap_bytes=64 << 10, obj_size=(16, 256),
                        insert_bytes=256 << 10, seed=9)
    assert list(ops(spec)) == list(ops(spec))
    other = WorkloadSpec(kind=kind, live_cap_bytes=64 << 10, obj_size=(16, 256),
                         insert_bytes=256 << 10, seed=10)
    assert list(ops(spec)) != list(ops(other))


@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0, 3))
@settings(max_examples=40)
def test_lru_churn_stays_under_cap(seed, samples, gets):
    spec = WorkloadSpec(live_cap_bytes=32 << 10, obj_size=(16, 700), insert_bytes=200 << 10,
                        seed=seed, samples=samples, get_ratio=gets)
    live, used = {}, 0
    after_alloc = False
    for op in ops(spec):
        if op[0] == "alloc":
            if after_alloc:
                assert used <= spec.live_cap_bytes
            live[op[1]] = op[2]
            used += charged(op[2])
            after_alloc = True
        elif op[0] == "free":
            used -= charged(live.pop(op[1]))
        elif op[0] == "get":
            assert op[1] in live
    assert used <= spec.live_cap_bytes


def test_op_count_and_idle_tail():
    spec = WorkloadSpec(op_count=10, idle_seconds=2.0)
    got = list(ops(spec))
    assert len(got) == 11 and got[-1] == ("idle", 2.0)


def test_workload_validation():
    with pytest.raises(ValueError):
        WorkloadSpec(kind="nope")
    with pytest.raises(ValueError):
        WorkloadSpec(obj_size=(10, 5))
    with pytest.raises(ValueError):
        WorkloadSpec(live_cap_bytes=0)


# experiments -----------------------------------------------------------------------

def test_csv_header_golden():
    golden = (DATA / "metrics_header.csv").read_text()
    res = run_experiment(WorkloadSpec(op_count=50, idle_seconds=0.2))
    assert res.csv_text().splitlines()[0] + "\n" == golden
    assert CSV_HEADER + "\n" == golden


def test_csv_reproducible():
    a = run_experiment(SMALL, ControlParams())
    b = run_experiment(SMALL, ControlParams())
    assert a.csv_text() == b.csv_text()
    assert a.trace_csv() == b.trace_csv()


def test_samples_append_only():
    res = run_experiment(SMALL, ControlParams())
    ticks = [s.tick for s in res.samples]
    assert ticks == list(range(len(ticks)))
    pauses = [s.pause_ms for s in res.samples]
    assert pauses == sorted(pauses)


def test_baseline_never_shrinks():
    res = run_experiment(SMALL)
    after = [s for s in res.samples if s.tick * res.sample_interval >= res.load_end]
    ext = [s.extent for s in after]
    assert ext == sorted(ext)
    assert not res.passes and res.final.mode == "off"


def test_controller_reduces_memory():
    off = run_experiment(SMALL)
    on = run_experiment(SMALL, ControlParams(), control_start=-1)
    assert on.final.resident < off.final.resident
    assert on.final.frag <= ControlParams().f_ub


def test_write_csv_error_names_path(tmp_path):
    res = run_experiment(WorkloadSpec(op_count=10, idle_seconds=0))
    bad = tmp_path / "missing" / "run.csv"
    with pytest.raises(OSError, match="missing"):
        res.write_csv(bad)
    good = tmp_path / "run.csv"
    res.write_csv(good)
    assert good.read_text() == res.csv_text()


def test_timing_mode_validated():
    with pytest.raises(ValueError):
        run_experiment(SMALL, ControlParams(), timing="wall")


def test_cost_model():
    c = CostModel(per_object_ns=1000, per_byte_ns=1, pass_fixed_ns=0)
    assert c.pass_seconds(10, 1000) == pytest.approx(11e-6)


def test_small_sweep_respects_bounds():
    rows = run_sweep(SMALL, 5, seed=2)
    for r in rows:
        assert r.max_window_overhead <= r.params.o_ub * 1.2
        assert r.hysteresis_violations == 0


def test_overhead_windows_between_waiting_ticks():
    res = run_experiment(SMALL, ControlParams(o_ub=0.1, alpha=0.1, poll_interval=0.1))
    assert res.passes
    w = max_window_overhead(res, 1.0)
    assert 0 <= w <= 0.12
    assert hysteresis_violations(res) == 0


def test_pinned_objects_never_move():
    spec = WorkloadSpec(live_cap_bytes=128 << 10, obj_size=(32, 300), insert_bytes=512 << 10,
                        seed=4, idle_seconds=5, pinned_fraction=0.3)
    res = run_experiment(spec, ControlParams(alpha=1.0))
    assert any(p.skipped_pinned for p in res.passes)


# pause study --------------------------------------------------------------------------

PS = PauseSpec(live_bytes=1 << 20, ops_total=3000, pause_interval=0.002, seed=1)


def test_pause_budget_and_pin_safety():
    r = run_pause_study(PS)
    assert r.pauses
    for p in r.pauses:
        # the budget may be overshot by at most one object
        assert p.moved_bytes < PS.budget + PS.obj_size[1] + 16


def test_no_pauses_matches_plain_latency():
    spec = PauseSpec(live_bytes=1 << 20, ops_total=2000, pause_interval=None, seed=1)
    a = run_pause_study(spec)
    assert not a.pauses
    # without pauses nothing queues: each latency is one operation's duration
    lo, hi = spec.op_ns * 0.5e-3, spec.op_ns * 1.5e-3
    assert all(lo - 1e-6 <= v <= hi + 1e-6 for v in a.latencies_us)
    b = run_pause_study(PauseSpec(**{**spec.__dict__, "pause_interval": 1e9}))
    assert a.latencies_us == b.latencies_us


def test_pause_study_deterministic():
    assert run_pause_study(PS).pause_csv() == run_pause_study(PS).pause_csv()


def test_threaded_pause_study_runs():
    r = run_pause_study(PauseSpec(mutators=3, live_bytes=512 << 10, ops_total=600,
                                  pause_interval=0.005), threaded=True)
    assert len(r.latencies_us) == 600
    assert all(p.pause_ms >= 0 for p in r.pauses)


def test_trend_rank_correlation():
    rs = [run_pause_study(PauseSpec(**{**PS.__dict__, "mutators": n})) for n in (1, 2, 4)]
    s = mutator_trend(rs)
    assert -1 <= s.rho <= 1
    assert s.csv().splitlines()[0].startswith("mutators,pauses")


def test_pause_spec_validation():
    with pytest.raises(ValueError):
        PauseSpec(mutators=0)
    with pytest.raises(ValueError):
        PauseSpec(load=0)
