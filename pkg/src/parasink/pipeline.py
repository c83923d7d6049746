"""Miniature on-demand event-processing framework.

Modules register what they consume and produce; the scheduler runs each event
through the resulting dependency graph on a shared work-stealing pool.
Events flow through logical streams (one in-flight event per stream), and a
per-module counting permit caps how many instances of a module run at once.
Dispatch is event-driven: a module blocked on its permit queues a waiter
instead of blocking a thread, so limited pools cannot deadlock.
"""

from __future__ import annotations

import enum
import hashlib
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from .codec import ColumnStore, ContainerAppender, FlushPolicy
from .errors import (
    ConfigurationError,
    ModuleExecutionError,
    SchemaMismatchError,
    ValidationError,
)
from .events import Event
from .imt import CompressionJob, compress_all, imt_epoch
from .merger import BufferMerger, MergeDecision, MergerConfig, MergeStats
from .monitor import RunningCounters, StallMonitor, StallSample
from .pool import TASK_KIND_MODULE, ProvenanceRecord, WorkStealingPool

_BURN_BLOCK = b"\x5a" * 65536  # large enough that hashing releases the GIL


def burn(units: int) -> None:
    """Simulated per-event processing cost: ``units`` hash rounds over a fixed block."""
    h = hashlib.sha256()
    for _ in range(units):
        h.update(_BURN_BLOCK)
    h.digest()


def calibrate_burn_unit_s(probe_units: int = 200) -> float:
    """Measured seconds per work unit on this host."""
    t0 = time.perf_counter()
    burn(probe_units)
    return (time.perf_counter() - t0) / probe_units


class ModuleKind(enum.Enum):
    PRODUCER = "producer"
    OUTPUT = "output"


@dataclass(frozen=True)
class ModuleSpec:
    """Declarative description of one framework module.

    ``concurrency_limit`` of None means unlimited. Producers burn
    ``cost_units`` of simulated work per event unless ``action`` overrides
    the behaviour; output modules write events through their ``sink``.
    """

    name: str
    kind: ModuleKind
    consumes: frozenset[str] = frozenset()
    produces: frozenset[str] = frozenset()
    concurrency_limit: int | None = None
    cost_units: int = 0
    sink: "OutputSink | None" = None
    action: Callable[[Event], None] | None = None

    def __post_init__(self):
        if not self.name:
            raise ValidationError("module name: must be non-empty")
        if self.concurrency_limit is not None and self.concurrency_limit < 1:
            raise ValidationError(
                f"module {self.name!r} concurrency_limit: must be >= 1 or None, got {self.concurrency_limit}"
            )
        if self.cost_units < 0:
            raise ValidationError(f"module {self.name!r} cost_units: must be >= 0")


@dataclass(frozen=True)
class Schedule:
    """Validated dependency DAG over a module list."""

    modules: tuple[ModuleSpec, ...]
    deps: dict[str, frozenset[str]]
    dependents: dict[str, frozenset[str]]
    topo_order: tuple[str, ...]

    def module(self, name: str) -> ModuleSpec:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)


def build_schedule(modules: Sequence[ModuleSpec], source_products: Iterable[str] = ()) -> Schedule:
    """Resolve producer/consumer dependencies into a DAG.

    ``source_products`` are satisfied by the event source itself. Raises
    ConfigurationError for duplicate names, duplicate producers of a product,
    consumes nothing provides, output modules that produce, or cycles.
    """
    source = frozenset(source_products)
    names = [m.name for m in modules]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ConfigurationError(f"duplicate module names: {dupes}")
    producer_of: dict[str, str] = {}
    for m in modules:
        if m.kind is ModuleKind.OUTPUT and m.produces:
            raise ConfigurationError(f"output module {m.name!r} must not produce (got {sorted(m.produces)})")
        for p in m.produces:
            if p in producer_of:
                raise ConfigurationError(f"product {p!r} produced by both {producer_of[p]!r} and {m.name!r}")
            if p in source:
                raise ConfigurationError(f"product {p!r} produced by {m.name!r} shadows a source product")
            producer_of[p] = m.name
    deps: dict[str, set[str]] = {m.name: set() for m in modules}
    for m in modules:
        for p in m.consumes:
            if p in source:
                continue
            maker = producer_of.get(p)
            if maker is None:
                raise ConfigurationError(f"module {m.name!r} consumes {p!r} but nothing produces it")
            deps[m.name].add(maker)
    # Kahn's algorithm; anything left over sits on a cycle
    indegree = {name: len(d) for name, d in deps.items()}
    ready = deque(sorted(name for name, d in indegree.items() if d == 0))
    dependents: dict[str, set[str]] = {m.name: set() for m in modules}
    for name, d in deps.items():
        for parent in d:
            dependents[parent].add(name)
    order: list[str] = []
    while ready:
        name = ready.popleft()
        order.append(name)
        for child in sorted(dependents[name]):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    if len(order) != len(modules):
        cycle = sorted(name for name, n in indegree.items() if n > 0)
        raise ConfigurationError(f"dependency cycle among modules: {cycle}")
    return Schedule(
        modules=tuple(modules),
        deps={name: frozenset(d) for name, d in deps.items()},
        dependents={name: frozenset(d) for name, d in dependents.items()},
        topo_order=tuple(order),
    )


def modules_from_config(kv: Mapping[str, str]) -> list[ModuleSpec]:
    """Build declarative module specs from flat ``module.<i>.*`` config keys.

    Keys: name, kind (producer|output), consumes, produces (comma lists),
    concurrency_limit (integer or 'unlimited'), cost.
    """
    indices = sorted(
        {int(k.split(".")[1]) for k in kv if k.startswith("module.") and k.split(".")[1].isdigit()}
    )
    out = []
    for i in indices:
        prefix = f"module.{i}."
        name = kv.get(prefix + "name")
        if name is None:
            raise ConfigurationError(f"missing config key {prefix}name")
        kind_raw = kv.get(prefix + "kind", "producer")
        try:
            kind = ModuleKind(kind_raw)
        except ValueError as exc:
            raise ConfigurationError(f"config key {prefix}kind: expected producer|output, got {kind_raw!r}") from exc

        def split(key: str) -> frozenset[str]:
            raw = kv.get(prefix + key, "")
            return frozenset(p.strip() for p in raw.split(",") if p.strip())

        limit_raw = kv.get(prefix + "concurrency_limit", "unlimited")
        limit = None if limit_raw == "unlimited" else int(limit_raw)
        out.append(
            ModuleSpec(
                name=name,
                kind=kind,
                consumes=split("consumes"),
                produces=split("produces"),
                concurrency_limit=limit,
                cost_units=int(kv.get(prefix + "cost", "0")),
            )
        )
    return out


# --- output sinks -----------------------------------------------------------


@dataclass
class SinkSummary:
    path: str | None
    events_written: int
    flush_windows: tuple[tuple[float, float], ...]
    merge_stats: MergeStats | None = None
    peak_buffer_bytes: int = 0


class OutputSink:
    """Destination for one output module's events."""

    def bind(self, pool: WorkStealingPool, clock_ms: Callable[[], float], isolation: bool) -> None:
        raise NotImplementedError

    def write_event(self, event: Event) -> None:
        raise NotImplementedError

    def finalize(self) -> SinkSummary:
        raise NotImplementedError

    #: maximum concurrent writers the sink tolerates (None = any)
    max_writers: int | None = None


def _project(event: Event, names: Sequence[str]) -> Event:
    """View of an event restricted to the products a sink stores."""
    try:
        return Event(event.event_id, {n: event.products[n] for n in names})
    except KeyError as exc:
        raise SchemaMismatchError(f"event {event.event_id}: missing product {exc.args[0]!r}") from None


class DummySink(OutputSink):
    """Discards events; no serialization, no compression."""

    def __init__(self):
        self.events = 0
        self._lock = threading.Lock()

    def bind(self, pool, clock_ms, isolation) -> None:
        pass

    def write_event(self, event: Event) -> None:
        with self._lock:
            self.events += 1

    def finalize(self) -> SinkSummary:
        return SinkSummary(path=None, events_written=self.events, flush_windows=())


class DirectContainerSink(OutputSink):
    """Classic single-writer output: serialize, compress, append in-line.

    Compression of cut baskets happens on the calling thread unless IMT is
    enabled process-wide, in which case it fans out over the shared pool.
    Requires its module's concurrency limit to be exactly 1.
    """

    max_writers = 1

    def __init__(self, path: str, product_names: Sequence[str], policy: FlushPolicy, *, codec_level: int = 6):
        self.path = path
        self.codec_level = codec_level
        self._product_names = tuple(product_names)
        self.store = ColumnStore(self._product_names, policy)
        self.appender = ContainerAppender(path)
        self.flush_windows: list[tuple[float, float]] = []
        self._pool: WorkStealingPool | None = None
        self._clock_ms: Callable[[], float] = lambda: 0.0
        self._isolation = True

    def bind(self, pool, clock_ms, isolation) -> None:
        self._pool = pool
        self._clock_ms = clock_ms
        self._isolation = isolation

    def _flush(self, baskets) -> None:
        t0 = self._clock_ms()
        compressed = compress_all(
            CompressionJob(baskets, level=self.codec_level, isolation=self._isolation), self._pool
        )
        self.appender.append_baskets(compressed)
        self.flush_windows.append((t0, self._clock_ms()))

    def write_event(self, event: Event) -> None:
        baskets = self.store.append_event(_project(event, self._product_names))
        self.appender.bump_events(1)
        if baskets:
            self._flush(baskets)

    def finalize(self) -> SinkSummary:
        residual = self.store.flush_all()
        if residual:
            self._flush(residual)
        self.appender.finalize()
        return SinkSummary(
            path=self.path,
            events_written=self.store.events_appended,
            flush_windows=tuple(self.flush_windows),
            peak_buffer_bytes=self.store.peak_pending_bytes,
        )


class MergerOutputSink(OutputSink):
    """Parallel output through a buffer-merger; writers up to buffer_count."""

    def __init__(
        self,
        path: str,
        product_names: Sequence[str],
        policy: FlushPolicy,
        merger_config: MergerConfig,
        *,
        codec_level: int = 6,
    ):
        self.path = path
        self.codec_level = codec_level
        self.merger_config = merger_config
        self._product_names = tuple(product_names)
        self._policy = policy
        self.max_writers = merger_config.buffer_count
        self.merger: BufferMerger | None = None
        self._clock_ms: Callable[[], float] = lambda: 0.0
        self._merge_windows: list[tuple[float, float]] = []
        self._windows_lock = threading.Lock()

    def bind(self, pool, clock_ms, isolation) -> None:
        self._clock_ms = clock_ms
        appender = ContainerAppender(self.path)
        self.merger = BufferMerger(
            self.merger_config,
            self._product_names,
            self._policy,
            appender,
            codec_level=self.codec_level,
            pool=pool,
            isolation=isolation,
        )

    def write_event(self, event: Event) -> None:
        merger = self.merger
        buf = merger.acquire()
        try:
            decision = merger.write_event(buf, _project(event, self._product_names))
        except BaseException:
            merger.release(buf)
            raise
        if decision is MergeDecision.MERGE_DUE:
            t0 = self._clock_ms()
            merger.merge(buf)
            with self._windows_lock:
                self._merge_windows.append((t0, self._clock_ms()))
        merger.release(buf)

    def finalize(self) -> SinkSummary:
        stats = self.merger.finalize()
        return SinkSummary(
            path=self.path,
            events_written=stats.events_written,
            flush_windows=tuple(self._merge_windows),
            merge_stats=stats,
            peak_buffer_bytes=stats.peak_buffer_bytes,
        )


# --- run loop ----------------------------------------------------------------


@dataclass
class RunReport:
    """Everything observed during one pipeline run; immutable after quiescence."""

    wall_s: float
    n_threads: int
    n_streams: int
    events_processed: int
    module_busy_s: dict[str, float]
    limits: dict[str, int | None]
    provenance: tuple[ProvenanceRecord, ...]
    samples: tuple[StallSample, ...]
    flush_windows: dict[str, tuple[tuple[float, float], ...]]
    merge_stats: dict[str, MergeStats]
    output_files: dict[str, str]
    peak_buffer_bytes: int
    sink_events: dict[str, int]

    def module_records(self, name: str) -> list[ProvenanceRecord]:
        return [r for r in self.provenance if r.kind == TASK_KIND_MODULE and r.module == name]

    def max_overlap(self, name: str) -> int:
        """Peak number of simultaneously running instances of one module."""
        edges: list[tuple[float, int]] = []
        for r in self.module_records(name):
            edges.append((r.t_start, 1))
            edges.append((r.t_end, -1))
        edges.sort()
        peak = cur = 0
        for _, delta in edges:
            cur += delta
            peak = max(peak, cur)
        return peak

    def to_csv(self, sink) -> None:
        sink.write("module,busy_s,max_overlap,limit,events\n")
        for name in sorted(self.module_busy_s):
            limit = self.limits.get(name)
            sink.write(
                f"{name},{self.module_busy_s[name]:.6f},{self.max_overlap(name)},"
                f"{'' if limit is None else limit},{len(self.module_records(name))}\n"
            )


class _StreamState:
    __slots__ = ("stream_id", "event", "done", "pending_deps")

    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.event: Event | None = None
        self.done: set[str] = set()
        self.pending_deps: dict[str, int] = {}


class _RunState:
    """Shared dispatch bookkeeping; all mutation under one lock."""

    def __init__(self, schedule: Schedule, pool: WorkStealingPool, counters: RunningCounters):
        self.schedule = schedule
        self.pool = pool
        self.counters = counters
        self.lock = threading.Lock()
        self.quiescent = threading.Condition(self.lock)
        self.permits = {
            m.name: (m.concurrency_limit if m.concurrency_limit is not None else float("inf"))
            for m in schedule.modules
        }
        self.waiters: dict[str, deque[_StreamState]] = {m.name: deque() for m in schedule.modules}
        self.active_streams = 0
        self.in_flight = 0
        self.failure: ModuleExecutionError | None = None
        self.events_done = 0
        self.scope = pool.scope("run")
        self.source: Iterator[Event] | None = None
        self.source_lock = threading.Lock()

    def advance_stream(self, stream: _StreamState) -> None:
        """Pull the stream's next event (outside the dispatch lock) and start it."""
        event = None
        if self.failure is None:
            with self.source_lock:
                event = next(self.source, None)
        with self.lock:
            if event is None:
                stream.event = None
                self.active_streams -= 1
                if self.active_streams == 0 and self.in_flight == 0:
                    self.quiescent.notify_all()
                return
            stream.event = event
            stream.done = set()
            stream.pending_deps = {name: len(d) for name, d in self.schedule.deps.items()}
            for name in self.schedule.topo_order:
                if stream.pending_deps[name] == 0:
                    self.maybe_dispatch_locked(stream, name)

    def maybe_dispatch_locked(self, stream: _StreamState, module_name: str) -> None:
        if self.failure is not None:
            return
        if self.permits[module_name] < 1:
            self.waiters[module_name].append(stream)
            return
        self.permits[module_name] -= 1
        self.in_flight += 1
        spec = self.schedule.module(module_name)
        event = stream.event
        error_cell: list[BaseException] = []
        self.pool.submit(
            self.scope,
            lambda: self._run_action(spec, event, error_cell),
            module=module_name,
            kind=TASK_KIND_MODULE,
            # permit release and successor dispatch stay outside the task's
            # timed window so measured intervals cannot exceed the limit
            on_complete=lambda: self._after_module(spec, stream, event, error_cell),
        )

    def _run_action(self, spec: ModuleSpec, event: Event, error_cell: list[BaseException]) -> None:
        if self.failure is not None:  # fast-path drain once a failure is recorded
            return
        self.counters.inc(spec.name)
        try:
            if spec.action is not None:
                spec.action(event)
            elif spec.kind is ModuleKind.OUTPUT:
                spec.sink.write_event(event)
            else:
                burn(spec.cost_units)
        except BaseException as exc:
            error_cell.append(exc)
        finally:
            self.counters.dec(spec.name)

    def _after_module(self, spec: ModuleSpec, stream: _StreamState, event: Event, error_cell) -> None:
        advance_me = False
        with self.lock:
            self.in_flight -= 1
            self.permits[spec.name] += 1
            if error_cell and self.failure is None:
                self.failure = ModuleExecutionError(spec.name, event.event_id, error_cell[0])
                self.waiters = {name: deque() for name in self.waiters}
            if self.failure is not None:
                if self.in_flight == 0:
                    self.quiescent.notify_all()
                return
            while self.waiters[spec.name] and self.permits[spec.name] >= 1:
                self.maybe_dispatch_locked(self.waiters[spec.name].popleft(), spec.name)
            stream.done.add(spec.name)
            for child in self.schedule.dependents[spec.name]:
                stream.pending_deps[child] -= 1
                if stream.pending_deps[child] == 0:
                    self.maybe_dispatch_locked(stream, child)
            if len(stream.done) == len(self.schedule.modules):
                self.events_done += 1
                advance_me = True
        if advance_me:
            self.advance_stream(stream)


def run(
    events: Iterable[Event],
    modules: Sequence[ModuleSpec],
    *,
    n_threads: int = 1,
    n_streams: int | None = None,
    imt: bool = False,
    isolation: bool = True,
    source_products: Iterable[str] = (),
    sample_period_ms: float | None = None,
    watchdog_s: float | None = None,
    pool: WorkStealingPool | None = None,
) -> RunReport:
    """Process every event through every module, respecting the DAG and limits.

    Returns after all sinks are finalized. ``sample_period_ms`` enables the
    stall monitor. A caller-supplied ``pool`` is left running; an internally
    created one is shut down.
    """
    if n_threads < 1:
        raise ValidationError(f"n_threads: must be >= 1, got {n_threads}")
    n_streams = n_threads if n_streams is None else n_streams
    if n_streams < 1:
        raise ValidationError(f"n_streams: must be >= 1, got {n_streams}")
    schedule = build_schedule(modules, source_products)
    for m in modules:
        if m.kind is ModuleKind.OUTPUT and m.sink is None and m.action is None:
            raise ConfigurationError(f"output module {m.name!r} has no sink")
        if m.sink is not None and m.sink.max_writers is not None:
            limit = m.concurrency_limit
            if limit is None or limit > m.sink.max_writers:
                raise ConfigurationError(
                    f"module {m.name!r}: sink allows {m.sink.max_writers} writer(s) "
                    f"but concurrency_limit is {limit}"
                )

    own_pool = pool is None
    if own_pool:
        pool = WorkStealingPool(n_threads, name="run")
    clock_ms = lambda: (time.perf_counter() - pool.started) * 1000.0  # noqa: E731
    counters = RunningCounters([m.name for m in modules])
    state = _RunState(schedule, pool, counters)

    monitor = None
    if sample_period_ms is not None:
        monitor = StallMonitor(
            counters,
            n_threads,
            period_ms=sample_period_ms,
            clock_ms=clock_ms,
            busy_threads=lambda: pool.threads_busy,
        )

    samples: tuple[StallSample, ...] = ()
    try:
        with imt_epoch(imt, n_threads):
            for m in modules:
                if m.sink is not None:
                    m.sink.bind(pool, clock_ms, isolation)
            t0 = time.perf_counter()
            if monitor:
                monitor.start()
            state.source = iter(events)
            state.active_streams = n_streams
            for i in range(n_streams):
                state.advance_stream(_StreamState(i))
            with state.quiescent:
                done = state.quiescent.wait_for(
                    lambda: state.in_flight == 0
                    and (state.active_streams == 0 or state.failure is not None),
                    timeout=watchdog_s,
                )
            if not done:
                raise TimeoutError(
                    f"run did not quiesce within {watchdog_s}s "
                    f"(active_streams={state.active_streams}, in_flight={state.in_flight})"
                )
            if state.failure is not None:
                raise state.failure
            summaries: dict[str, SinkSummary] = {}
            for m in modules:
                if m.sink is not None:
                    summaries[m.name] = m.sink.finalize()
            wall_s = time.perf_counter() - t0
    finally:
        if monitor:
            samples = monitor.stop()
        if own_pool:
            pool.shutdown()

    provenance = pool.provenance.records()
    busy: dict[str, float] = {m.name: 0.0 for m in modules}
    for r in provenance:
        if r.kind == TASK_KIND_MODULE and r.module in busy:
            busy[r.module] += r.t_end - r.t_start
    return RunReport(
        wall_s=wall_s,
        n_threads=n_threads,
        n_streams=n_streams,
        events_processed=state.events_done,
        module_busy_s=busy,
        limits={m.name: m.concurrency_limit for m in modules},
        provenance=provenance,
        samples=tuple(samples),
        flush_windows={name: s.flush_windows for name, s in summaries.items()},
        merge_stats={name: s.merge_stats for name, s in summaries.items() if s.merge_stats},
        output_files={name: s.path for name, s in summaries.items() if s.path},
        peak_buffer_bytes=max((s.peak_buffer_bytes for s in summaries.values()), default=0),
        sink_events={name: s.events_written for name, s in summaries.items()},
    )
