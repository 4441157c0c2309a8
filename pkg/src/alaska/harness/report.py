"""Report output: CSV files, a gnuplot script and PNG figures.

Every figure is written next to the CSV it was drawn from, so the gnuplot
script can redraw the same curves without Python.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .experiment import ExperimentResult, SweepRow
from .pause import StudySummary

MIB = float(1 << 20)


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def sibling(path: Path, suffix: str) -> Path:
    """``run.csv`` -> ``run.<suffix>``, or ``run-<label>.csv`` style names."""
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# gnuplot

def gnuplot_memory(csvs: Dict[str, Path], interval: float, png: str) -> str:
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set terminal pngcairo size 900,600",
        f"set output '{png}'",
        "set multiplot layout 2,1",
        "set xlabel 'time (s)'",
        "set ylabel 'resident (MiB)'",
    ]
    plots = [f"'{p.name}' using ($1*{interval}):($4/{MIB:.0f}) with lines title '{label}'"
             for label, p in csvs.items()]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines.append("set ylabel 'extent / live'")
    plots = [f"'{p.name}' using ($1*{interval}):5 with lines title '{label}'"
             for label, p in csvs.items()]
    lines.append("plot " + ", \\\n     ".join(plots))
    lines.append("unset multiplot")
    return "\n".join(lines) + "\n"


def gnuplot_sweep(csv: Path, png: str) -> str:
    return "\n".join([
        "set datafile separator ','",
        "set terminal pngcairo size 700,600",
        f"set output '{png}'",
        "set xlabel 'O_ub'",
        "set ylabel 'worst window overhead'",
        "f(x) = 1.2 * x",
        f"plot '{csv.name}' every ::1 using 4:8 with points pt 7 title 'runs', "
        "f(x) with lines title '1.2 O_ub'",
    ]) + "\n"


def gnuplot_pause(csv: Path, png: str) -> str:
    return "\n".join([
        "set datafile separator ','",
        "set terminal pngcairo size 700,500",
        f"set output '{png}'",
        "set xlabel 'mutators'",
        "set ylabel 'pause (ms)'",
        "set logscale x 2",
        f"plot '{csv.name}' every ::1 using 2:3 with points pt 7 title 'pauses'",
    ]) + "\n"


# ---------------------------------------------------------------------------
# matplotlib

def plot_memory(runs: Dict[str, ExperimentResult], png: Path) -> Path:
    plt = _pyplot()
    fig, (top, bot) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    for label, r in runs.items():
        t = [s.tick * r.sample_interval for s in r.samples]
        top.plot(t, [s.resident / MIB for s in r.samples], label=label)
        bot.plot(t, [s.frag for s in r.samples], label=label)
        if r.params is not None:
            bot.axhline(r.params.f_ub, color="grey", ls=":", lw=0.8)
            bot.axhline(r.params.f_lb, color="grey", ls="--", lw=0.8)
    top.set_ylabel("resident (MiB)")
    bot.set_ylabel("extent / live")
    bot.set_xlabel("time (s)")
    top.legend()
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png


def plot_passes(res: ExperimentResult, png: Path) -> Path:
    """Fragmentation over time with each pass and its computed back-off."""
    plt = _pyplot()
    fig, (top, bot) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    t = [s.tick * res.sample_interval for s in res.samples]
    top.plot(t, [s.frag for s in res.samples])
    top.set_ylabel("extent / live")
    if res.params is not None:
        top.axhline(res.params.f_ub, color="grey", ls=":", lw=0.8)
    starts = [p.start for p in res.passes]
    bot.stem(starts, [p.sleep_after for p in res.passes])
    if res.params is not None:
        bot.axhline(20 * res.params.poll_interval, color="red", ls="--", lw=0.8,
                    label="20 x poll")
        bot.legend()
    bot.set_ylabel("sleep after pass (s)")
    bot.set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png


def plot_sweep(rows: Sequence[SweepRow], png: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 6))
    xs = [r.params.o_ub for r in rows]
    ax.scatter(xs, [r.max_window_overhead for r in rows], s=12, label="worst window")
    ax.scatter(xs, [r.overall_overhead for r in rows], s=12, marker="x", label="whole run")
    hi = max(xs, default=0.3)
    ax.plot([0, hi], [0, 1.2 * hi], color="red", lw=0.8, label="1.2 O_ub")
    ax.set_xlabel("O_ub")
    ax.set_ylabel("defrag time fraction")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png


def plot_pause(summary: StudySummary, png: Path) -> Path:
    plt = _pyplot()
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4.5))
    counts = [r.spec.mutators for r in summary.results]
    left.boxplot([[p.pause_ms for p in r.pauses] for r in summary.results],
                 tick_labels=[str(c) for c in counts])
    left.set_xlabel("mutators")
    left.set_ylabel("pause (ms)")
    left.set_title(f"rho = {summary.rho:.2f}")
    for r in summary.results:
        lat = sorted(r.latencies_us)
        if lat:
            n = len(lat)
            right.plot(lat, [(i + 1) / n for i in range(n)], label=f"{r.spec.mutators}")
    right.set_xscale("log")
    right.set_xlabel("operation latency (us)")
    right.set_ylabel("CDF")
    right.legend(title="mutators")
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png


# ---------------------------------------------------------------------------
# bundles

def write_memory_report(out: Path, runs: Dict[str, ExperimentResult],
                        plot: bool = True) -> List[Path]:
    """One CSV per run plus a gnuplot script and, if ``plot``, a PNG."""
    out = Path(out)
    written = []
    csvs = {}
    for label, r in runs.items():
        p = out if len(runs) == 1 else out.with_name(f"{out.stem}-{label}{out.suffix}")
        written.append(_write(p, r.csv_text()))
        csvs[label] = p
    interval = next(iter(runs.values())).sample_interval
    png = sibling(out, ".png")
    written.append(_write(sibling(out, ".gp"), gnuplot_memory(csvs, interval, png.name)))
    if plot:
        written.append(plot_memory(runs, png))
    return written


def write_trace(out: Path, res: ExperimentResult, plot: bool = True) -> List[Path]:
    written = [_write(sibling(out, "-trace.csv"), res.trace_csv())]
    passes = ["start,duration,budget,moved_bytes,moved_objects,skipped_pinned,"
              "frag_before,frag_after,sleep_after"]
    passes += [f"{p.start:.6f},{p.duration:.6f},{p.budget},{p.moved_bytes},{p.moved_objects},"
               f"{p.skipped_pinned},{p.frag_before:.6f},{p.frag_after:.6f},{p.sleep_after:.6f}"
               for p in res.passes]
    written.append(_write(sibling(out, "-passes.csv"), "\n".join(passes) + "\n"))
    if plot and res.params is not None:
        written.append(plot_passes(res, sibling(out, "-passes.png")))
    return written


def write_sweep_report(out: Path, rows: Sequence[SweepRow], plot: bool = True) -> List[Path]:
    out = Path(out)
    text = SweepRow.HEADER + "\n" + "".join(r.csv() + "\n" for r in rows)
    png = sibling(out, ".png")
    written = [_write(out, text), _write(sibling(out, ".gp"), gnuplot_sweep(out, png.name))]
    if plot:
        written.append(plot_sweep(rows, png))
    return written


def write_pause_report(out: Path, summary: StudySummary, plot: bool = True) -> List[Path]:
    out = Path(out)
    pauses = out.with_name(out.stem + "-pauses.csv")
    body = []
    for r in summary.results:
        body += r.pause_csv().splitlines()[1:]
    header = summary.results[0].pause_csv().splitlines()[0] if summary.results else ""
    lat = [summary.results[0].latency_csv().splitlines()[0]] if summary.results else []
    for r in summary.results:
        lat += r.latency_csv().splitlines()[1:]
    png = sibling(out, ".png")
    written = [
        _write(out, "\n".join(lat) + "\n"),
        _write(pauses, "\n".join([header] + body) + "\n"),
        _write(sibling(out, "-summary.csv"), summary.csv()),
        _write(sibling(out, ".gp"), gnuplot_pause(pauses, png.name)),
    ]
    if plot:
        written.append(plot_pause(summary, png))
    return written
