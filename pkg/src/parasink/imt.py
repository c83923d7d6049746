"""Parallel basket compression over a shared work-stealing pool.

Mirrors the enable-once model of implicit multi-threading: a process-wide
switch turns the parallel path on or off, and compression jobs submit one
task per basket. The submitting thread waits for its own tasks and, with
isolation on, never executes work created outside the job while doing so.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

from .codec import Basket, CompressedBasket, compress_basket
from .errors import UsageError, ValidationError
from .pool import TASK_KIND_SUBTASK, WorkStealingPool


@dataclass
class CompressionJob:
    """A batch of baskets to compress at one codec level."""

    baskets: list[Basket] = field(default_factory=list)
    level: int = 6
    isolation: bool = True

    def __post_init__(self):
        if not 0 <= self.level <= 9:
            raise ValidationError(f"codec level: must be in [0, 9], got {self.level}")


class _ImtRuntime:
    """Process-wide IMT switch plus the default pool for standalone callers."""

    def __init__(self):
        self._lock = threading.Lock()
        self.enabled = False
        self.pool_size = os.cpu_count() or 1
        self._used = False
        self._default_pool: WorkStealingPool | None = None

    def configure(self, enabled: bool, pool_size: int) -> None:
        if pool_size < 1:
            raise ValidationError(f"pool_size: must be >= 1, got {pool_size}")
        with self._lock:
            if self._used:
                raise UsageError("IMT cannot be reconfigured after compress_all has run; call reset_imt() first")
            self.enabled = enabled
            self.pool_size = pool_size

    def mark_used(self) -> None:
        with self._lock:
            self._used = True

    def default_pool(self) -> WorkStealingPool:
        with self._lock:
            if self._default_pool is None:
                self._default_pool = WorkStealingPool(self.pool_size, name="imt")
            return self._default_pool

    def reset(self) -> None:
        with self._lock:
            pool, self._default_pool = self._default_pool, None
            self.enabled = False
            self.pool_size = os.cpu_count() or 1
            self._used = False
        if pool is not None:
            pool.shutdown()


_RUNTIME = _ImtRuntime()


def set_imt(enabled: bool, pool_size: int) -> None:
    """Configure the process-wide IMT switch. Must precede any compress_all.

    ``pool_size`` sizes the pool used when :func:`compress_all` is called
    without an explicit one; jobs running on a shared framework pool keep
    that pool's size.
    """
    _RUNTIME.configure(enabled, pool_size)


def imt_enabled() -> bool:
    return _RUNTIME.enabled


def reset_imt() -> None:
    """End the current IMT epoch: shut the default pool down and allow set_imt again."""
    _RUNTIME.reset()


@contextmanager
def imt_epoch(enabled: bool, pool_size: int):
    """Scoped IMT configuration, used by the pipeline to run one job per setting."""
    reset_imt()
    set_imt(enabled, pool_size)
    try:
        yield
    finally:
        reset_imt()


def compress_all(job: CompressionJob, pool: WorkStealingPool | None = None) -> list[CompressedBasket]:
    """Compress every basket of ``job``, preserving input order.

    Runs strictly sequentially on the caller when IMT is disabled; otherwise
    one pool task per basket. A failing basket fails the whole job with the
    first error after draining the remaining tasks.
    """
    _RUNTIME.mark_used()
    if not job.baskets:
        return []
    if not _RUNTIME.enabled:
        return [compress_basket(b, job.level) for b in job.baskets]
    if pool is None:
        pool = _RUNTIME.default_pool()
    results: list[CompressedBasket | None] = [None] * len(job.baskets)
    scope = pool.scope("compress")

    def make_task(i: int, basket: Basket):
        def run() -> None:
            results[i] = compress_basket(basket, job.level)

        return run

    for i, basket in enumerate(job.baskets):
        pool.submit(scope, make_task(i, basket), kind=TASK_KIND_SUBTASK, module=None)
    pool.wait(scope, isolation=job.isolation)
    return results  # type: ignore[return-value]
