"""Parallel output through a fixed pool of in-memory file buffers.

Writers check a buffer out of a concurrent priority queue (fullest first,
ties to the lowest buffer id), serialize and compress events into it, and
merge it into the final container on their own thread once it crosses the
configured thresholds. The final-file appender is an exclusive region, so
exactly one merge is in flight at a time.
"""

from __future__ import annotations

import enum
import heapq
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .codec import ColumnStore, CompressedBasket, ContainerAppender, FlushPolicy
from .errors import LifecycleError, ValidationError
from .events import Event
from .imt import CompressionJob, compress_all
from .pool import WorkStealingPool


class MergeDecision(enum.Enum):
    KEEP = "keep"
    MERGE_DUE = "merge_due"


class QueuePolicy(enum.Enum):
    """Buffer selection rule. ROUND_ROBIN exists for comparison runs only."""

    FULLEST_FIRST = "fullest_first"
    ROUND_ROBIN = "round_robin"


@dataclass(frozen=True)
class MergerConfig:
    buffer_count: int
    merge_threshold_bytes: int
    merge_threshold_events: int | None = None
    policy: QueuePolicy = QueuePolicy.FULLEST_FIRST

    def __post_init__(self):
        if self.buffer_count < 1:
            raise ValidationError(f"buffer_count: must be >= 1, got {self.buffer_count}")
        if self.merge_threshold_bytes < 1:
            raise ValidationError(f"merge_threshold_bytes: must be >= 1, got {self.merge_threshold_bytes}")
        if self.merge_threshold_events is not None and self.merge_threshold_events < 1:
            raise ValidationError(
                f"merge_threshold_events: must be >= 1, got {self.merge_threshold_events}"
            )


@dataclass
class MergeStats:
    """Post-run accounting, including the end-of-job tail distribution."""

    tail_events_per_buffer: list[int] = field(default_factory=list)
    merges: int = 0
    merge_time_total_s: float = 0.0
    events_written: int = 0
    peak_buffer_bytes: int = 0


class MemoryFileBuffer:
    """An in-memory file image: pending columns plus already-compressed baskets.

    Checked out by at most one writer at a time; all counters are relative to
    the last merge (a merge resets the buffer to empty).
    """

    def __init__(self, buffer_id: int, product_names, policy: FlushPolicy):
        self.buffer_id = buffer_id
        self._product_names = tuple(product_names)
        self._policy = policy
        self.store = ColumnStore(self._product_names, policy)
        self.compressed: list[CompressedBasket] = []
        self.events_stored = 0
        self.bytes_stored = 0

    def resident_bytes(self) -> int:
        return self.store.pending_bytes() + sum(cb.compressed_len for cb in self.compressed)

    def reset(self) -> None:
        self.store = ColumnStore(self._product_names, self._policy)
        self.compressed = []
        self.events_stored = 0
        self.bytes_stored = 0


class MergeQueue:
    """Concurrent pool of idle buffers.

    Under FULLEST_FIRST, ``acquire`` returns an available buffer with the
    most events stored, ties broken by the lowest buffer id; under
    ROUND_ROBIN it returns the least recently released buffer. ``acquire``
    blocks while every buffer is checked out or merging.
    """

    def __init__(self, buffers: list[MemoryFileBuffer], policy: QueuePolicy = QueuePolicy.FULLEST_FIRST):
        self.policy = policy
        self.capacity = len(buffers)
        self._cond = threading.Condition()
        self._heap: list[tuple[int, int, MemoryFileBuffer]] = []
        self._fifo: deque[MemoryFileBuffer] = deque()
        self._closed = False
        for buf in buffers:
            self._put(buf)

    def _put(self, buf: MemoryFileBuffer) -> None:
        if self.policy is QueuePolicy.FULLEST_FIRST:
            heapq.heappush(self._heap, (-buf.events_stored, buf.buffer_id, buf))
        else:
            self._fifo.append(buf)

    def _get(self) -> MemoryFileBuffer:
        if self.policy is QueuePolicy.FULLEST_FIRST:
            return heapq.heappop(self._heap)[2]
        return self._fifo.popleft()

    def _size(self) -> int:
        return len(self._heap) + len(self._fifo)

    def acquire(self, timeout: float | None = None) -> MemoryFileBuffer:
        with self._cond:
            if self._closed:
                raise LifecycleError("acquire after finalize")
            if not self._cond.wait_for(lambda: self._size() > 0 or self._closed, timeout):
                raise TimeoutError("no buffer became available")
            if self._closed:
                raise LifecycleError("acquire after finalize")
            return self._get()

    def release(self, buf: MemoryFileBuffer) -> None:
        with self._cond:
            self._put(buf)
            self._cond.notify()

    def drain(self) -> list[MemoryFileBuffer]:
        """Remove and return all idle buffers, closing the queue. For finalize."""
        with self._cond:
            if self._closed:
                raise LifecycleError("queue already finalized")
            self._closed = True
            out = []
            while self._size():
                out.append(self._get())
            self._cond.notify_all()
            return out


class BufferMerger:
    """Drives one output file through a buffer pool.

    ``write_event`` is safe to call concurrently up to ``buffer_count``
    writers; ``merge`` happens on the calling thread and serializes on the
    appender's exclusive region; ``finalize`` is single-caller and merges
    every buffer regardless of fill level.
    """

    def __init__(
        self,
        config: MergerConfig,
        product_names,
        flush_policy: FlushPolicy,
        appender: ContainerAppender,
        *,
        codec_level: int = 6,
        pool: WorkStealingPool | None = None,
        isolation: bool = True,
    ):
        self.config = config
        self.appender = appender
        self.codec_level = codec_level
        self.pool = pool
        self.isolation = isolation
        buffers = [
            MemoryFileBuffer(i, product_names, flush_policy) for i in range(config.buffer_count)
        ]
        self.queue = MergeQueue(buffers, config.policy)
        self._stats_lock = threading.Lock()
        self.stats = MergeStats()
        self._resident = {i: 0 for i in range(config.buffer_count)}
        self._finalized = False
        self.merges_in_flight = 0

    # --- accounting --------------------------------------------------------

    def _account(self, buf: MemoryFileBuffer) -> None:
        with self._stats_lock:
            self._resident[buf.buffer_id] = buf.resident_bytes()
            total = sum(self._resident.values())
            if total > self.stats.peak_buffer_bytes:
                self.stats.peak_buffer_bytes = total

    # --- write path ----------------------------------------------------------

    def acquire(self) -> MemoryFileBuffer:
        return self.queue.acquire()

    def release(self, buf: MemoryFileBuffer) -> None:
        self.queue.release(buf)

    def write_event(self, buf: MemoryFileBuffer, event: Event) -> MergeDecision:
        """Append one event to a checked-out buffer, compressing cut baskets."""
        baskets = buf.store.append_event(event)
        if baskets:
            buf.compressed.extend(
                compress_all(
                    CompressionJob(baskets, level=self.codec_level, isolation=self.isolation),
                    self.pool,
                )
            )
        buf.events_stored += 1
        buf.bytes_stored += event.raw_size() + 8
        self._account(buf)
        cfg = self.config
        if buf.bytes_stored >= cfg.merge_threshold_bytes:
            return MergeDecision.MERGE_DUE
        if cfg.merge_threshold_events is not None and buf.events_stored >= cfg.merge_threshold_events:
            return MergeDecision.MERGE_DUE
        return MergeDecision.KEEP

    def merge(self, buf: MemoryFileBuffer) -> None:
        """Flush, append to the final container, and reset ``buf``.

        Runs on the caller's thread. On appender failure the buffer is left
        checked out (never re-queued), making the error job-fatal.
        """
        t0 = time.perf_counter()
        with self._stats_lock:
            self.merges_in_flight += 1
        try:
            residual = buf.store.flush_all()
            if residual:
                buf.compressed.extend(
                    compress_all(
                        CompressionJob(residual, level=self.codec_level, isolation=self.isolation),
                        self.pool,
                    )
                )
            with self.appender.exclusive():
                self.appender.append_baskets(buf.compressed, rebase=self.appender.total_events)
                self.appender.bump_events(buf.events_stored)
            buf.reset()
            self._account(buf)
        finally:
            dt = time.perf_counter() - t0
            with self._stats_lock:
                self.merges_in_flight -= 1
                self.stats.merges += 1
                self.stats.merge_time_total_s += dt

    def write(self, event: Event) -> None:
        """Convenience wrapper: acquire, write, merge when due, release."""
        buf = self.acquire()
        try:
            decision = self.write_event(buf, event)
        except BaseException:
            # store validation happens before any mutation, so the buffer is
            # still consistent and goes back to the queue
            self.release(buf)
            raise
        if decision is MergeDecision.MERGE_DUE:
            self.merge(buf)  # a merge failure is job-fatal: buffer stays out
        self.release(buf)

    def finalize(self) -> MergeStats:
        """Merge every buffer (full or not), write the trailer, return stats."""
        if self._finalized:
            raise LifecycleError("merger already finalized")
        self._finalized = True
        buffers = self.queue.drain()
        if len(buffers) != self.config.buffer_count:
            raise LifecycleError(
                f"finalize with {self.config.buffer_count - len(buffers)} buffer(s) still checked out"
            )
        buffers.sort(key=lambda b: b.buffer_id)
        self.stats.tail_events_per_buffer = [b.events_stored for b in buffers]
        for buf in buffers:
            self.merge(buf)
        self.stats.events_written = self.appender.total_events
        self.appender.finalize()
        return self.stats
