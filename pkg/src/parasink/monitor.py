"""Concurrency sampling: periodic snapshots of running modules over a run.

A dedicated sampler thread reads per-module running counters and the
executor's busy-thread gauge on a fixed period. The aggregated report gives
the job's stall fraction (idle thread-capacity) and a per-module attribution:
how often a module sat at its full permit count while the job ran below its
thread ceiling. Module-level occupancy undercounts real CPU use whenever
compression subtasks fill otherwise-idle threads, so samples carry the
executor-level busy count alongside.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, TextIO

DEFAULT_SAMPLE_PERIOD_MS = 50.0
SVG_WIDTH = 1000
SVG_HEIGHT = 300


@dataclass(frozen=True)
class StallSample:
    """One snapshot: how many module instances ran, per module and in total."""

    t_ms: float
    running_total: int
    running_by_module: Mapping[str, int]
    n_threads: int
    threads_busy: int


@dataclass(frozen=True)
class StallReport:
    """Aggregate over a run's samples."""

    samples: tuple[StallSample, ...]
    n_threads: int
    module_names: tuple[str, ...]
    stall_fraction: float
    module_occupancy: float
    thread_occupancy: float
    attribution: dict[str, float]


class RunningCounters:
    """Per-module running-instance gauges, snapshotted atomically."""

    def __init__(self, module_names: Iterable[str]):
        self._lock = threading.Lock()
        self._counts = {name: 0 for name in module_names}

    def inc(self, name: str) -> None:
        with self._lock:
            self._counts[name] += 1

    def dec(self, name: str) -> None:
        with self._lock:
            self._counts[name] -= 1

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


class StallMonitor:
    """Sampler thread; start() before the run, stop() after quiescence."""

    def __init__(
        self,
        counters: RunningCounters,
        n_threads: int,
        *,
        period_ms: float = DEFAULT_SAMPLE_PERIOD_MS,
        clock_ms: Callable[[], float] | None = None,
        busy_threads: Callable[[], int] | None = None,
    ):
        self.counters = counters
        self.n_threads = n_threads
        self.period_ms = period_ms
        t0 = time.perf_counter()
        self._clock_ms = clock_ms or (lambda: (time.perf_counter() - t0) * 1000.0)
        self._busy = busy_threads or (lambda: 0)
        self._samples: list[StallSample] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def sample_once(self) -> StallSample:
        by_module = self.counters.snapshot()
        sample = StallSample(
            t_ms=self._clock_ms(),
            running_total=sum(by_module.values()),
            running_by_module=by_module,
            n_threads=self.n_threads,
            threads_busy=self._busy(),
        )
        self._samples.append(sample)
        return sample

    def _loop(self) -> None:
        period_s = self.period_ms / 1000.0
        while not self._stop.wait(period_s):
            self.sample_once()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name="stall-monitor", daemon=True)
        self._thread.start()

    def stop(self) -> tuple[StallSample, ...]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return tuple(self._samples)


def build_report(
    samples: Sequence[StallSample],
    n_threads: int,
    *,
    limits: Mapping[str, int | None] | None = None,
) -> StallReport:
    """Aggregate samples; ``limits`` feeds the per-module stall attribution."""
    limits = limits or {}
    module_names: tuple[str, ...] = ()
    if samples:
        module_names = tuple(samples[0].running_by_module)
    if not samples:
        return StallReport((), n_threads, (), 0.0, 0.0, 0.0, {})
    mean_running = statistics.fmean(s.running_total for s in samples)
    mean_busy = statistics.fmean(s.threads_busy for s in samples)
    attribution = {}
    for name in module_names:
        limit = limits.get(name)
        if limit is None:
            attribution[name] = 0.0
            continue
        hits = sum(
            1
            for s in samples
            if s.running_by_module.get(name, 0) >= limit and s.running_total < s.n_threads
        )
        attribution[name] = hits / len(samples)
    stall = 1.0 - mean_running / n_threads
    return StallReport(
        samples=tuple(samples),
        n_threads=n_threads,
        module_names=module_names,
        stall_fraction=min(max(stall, 0.0), 1.0),
        module_occupancy=mean_running / n_threads,
        thread_occupancy=mean_busy / n_threads,
        attribution=attribution,
    )


# --- emission --------------------------------------------------------------

def write_stall_csv(report: StallReport, sink: TextIO) -> None:
    """CSV schema: t_ms,total,<module>... one row per sample."""
    header = ["t_ms", "total", *report.module_names]
    sink.write(",".join(header) + "\n")
    for s in report.samples:
        row = [f"{s.t_ms:.3f}", str(s.running_total)]
        row += [str(s.running_by_module.get(name, 0)) for name in report.module_names]
        sink.write(",".join(row) + "\n")


def write_stall_svg(report: StallReport, sink: TextIO) -> None:
    """Area chart of running modules vs. time with the thread-count ceiling."""
    w, h, pad = SVG_WIDTH, SVG_HEIGHT, 30
    sink.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" '
        f'width="{w}" height="{h}">\n'
    )
    sink.write(f'<rect width="{w}" height="{h}" fill="white"/>\n')
    samples = report.samples
    if samples:
        t_max = max(samples[-1].t_ms, 1e-9)
        y_max = max(report.n_threads, max(s.running_total for s in samples), 1)

        def x(t: float) -> float:
            return pad + (w - 2 * pad) * t / t_max

        def y(v: float) -> float:
            return h - pad - (h - 2 * pad) * v / y_max

        pts = [f"{x(0):.2f},{y(0):.2f}"]
        for s in samples:
            pts.append(f"{x(s.t_ms):.2f},{y(s.running_total):.2f}")
        pts.append(f"{x(samples[-1].t_ms):.2f},{y(0):.2f}")
        sink.write(
            f'<polygon points="{" ".join(pts)}" fill="#2e7d32" fill-opacity="0.65" stroke="none"/>\n'
        )
        ceiling = y(report.n_threads)
        sink.write(
            f'<line x1="{pad}" y1="{ceiling:.2f}" x2="{w - pad}" y2="{ceiling:.2f}" '
            f'stroke="#c62828" stroke-dasharray="6 4"/>\n'
        )
        sink.write(
            f'<text x="{pad}" y="{ceiling - 5:.2f}" font-size="12" fill="#c62828">'
            f"{report.n_threads} threads</text>\n"
        )
    sink.write("</svg>\n")


def emit_stall_graph(report: StallReport, csv_sink: TextIO, svg_sink: TextIO | None = None) -> None:
    """Write the sample series as CSV and, optionally, the SVG area chart."""
    write_stall_csv(report, csv_sink)
    if svg_sink is not None:
        write_stall_svg(report, svg_sink)


def gap_flush_correlation(
    report: StallReport,
    flush_windows: Sequence[tuple[float, float]],
    *,
    gap_threshold: int | None = None,
) -> float:
    """Pearson correlation between low-occupancy samples and flush windows.

    ``flush_windows`` are (start_ms, end_ms) intervals during which an output
    module was compressing/writing. The gap indicator marks samples whose
    running_total falls below ``gap_threshold`` (default: the thread count).
    Returns 0.0 when either series is constant.
    """
    samples = report.samples
    if not samples or not flush_windows:
        return 0.0
    threshold = report.n_threads if gap_threshold is None else gap_threshold
    windows = sorted(flush_windows)
    gap = [1.0 if s.running_total < threshold else 0.0 for s in samples]
    in_flush = []
    for s in samples:
        hit = any(t0 <= s.t_ms <= t1 for t0, t1 in windows)
        in_flush.append(1.0 if hit else 0.0)
    if len(set(gap)) < 2 or len(set(in_flush)) < 2:
        return 0.0
    return statistics.correlation(gap, in_flush)
