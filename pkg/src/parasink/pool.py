"""Instrumented work-stealing thread pool with task isolation scopes.

Every thread that submits work owns a local task queue. Workers pop their own
queue newest-first and steal oldest-first from other queues when idle. A
thread blocked in :meth:`WorkStealingPool.wait` helps execute tasks while it
waits; the ``isolation`` flag decides whether it may only run tasks belonging
to the scope it is waiting on, or any pending task in the pool (the stealing
behaviour that lets a waiting thread pick up an expensive unrelated task).

Every executed task is recorded in a per-thread provenance log with its scope,
submitting module, and start/end timestamps, which is what the concurrency
and isolation assertions in the test suite are built on.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .errors import LifecycleError

TASK_KIND_MODULE = "module"
TASK_KIND_SUBTASK = "subtask"
TASK_KIND_PLAIN = "task"

_task_ids = itertools.count()
_scope_ids = itertools.count()


@dataclass(frozen=True)
class ProvenanceRecord:
    """One executed task: who ran it, for which scope, and when."""

    task_id: int
    scope_id: int
    scope_label: str
    module: str | None
    kind: str
    thread: str
    t_start: float
    t_end: float


class ProvenanceLog:
    """Append-only per-thread execution log.

    Each thread appends only to its own list, so appends are uncontended; the
    merged, time-sorted view is built on demand after quiescence.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._by_thread: dict[str, list[ProvenanceRecord]] = {}

    def _list_for(self, thread_name: str) -> list[ProvenanceRecord]:
        lst = self._by_thread.get(thread_name)
        if lst is None:
            with self._lock:
                lst = self._by_thread.setdefault(thread_name, [])
        return lst

    def append(self, record: ProvenanceRecord) -> None:
        self._list_for(record.thread).append(record)

    def records(self) -> tuple[ProvenanceRecord, ...]:
        with self._lock:
            merged = [r for lst in self._by_thread.values() for r in lst]
        merged.sort(key=lambda r: (r.t_start, r.task_id))
        return tuple(merged)

    def by_thread(self) -> dict[str, tuple[ProvenanceRecord, ...]]:
        with self._lock:
            return {name: tuple(lst) for name, lst in self._by_thread.items()}


class TaskScope:
    """Completion tracker for one group of related tasks.

    Failing tasks record the first error; once a scope has failed, its not-yet
    started tasks are drained without running. ``wait`` re-raises the first
    error after all tasks have been consumed.
    """

    def __init__(self, scope_id: int, label: str):
        self.scope_id = scope_id
        self.label = label
        self._cond = threading.Condition()
        self._pending = 0
        self.first_error: BaseException | None = None

    def _task_created(self) -> None:
        with self._cond:
            self._pending += 1

    def _task_finished(self, error: BaseException | None) -> None:
        with self._cond:
            if error is not None and self.first_error is None:
                self.first_error = error
            self._pending -= 1
            if self._pending == 0:
                self._cond.notify_all()

    @property
    def pending(self) -> int:
        with self._cond:
            return self._pending

    @property
    def done(self) -> bool:
        with self._cond:
            return self._pending == 0


class _Task:
    __slots__ = ("task_id", "fn", "scope", "module", "kind", "on_complete")

    def __init__(
        self,
        fn: Callable[[], None],
        scope: TaskScope,
        module: str | None,
        kind: str,
        on_complete: Callable[[], None] | None,
    ):
        self.task_id = next(_task_ids)
        self.fn = fn
        self.scope = scope
        self.module = module
        self.kind = kind
        self.on_complete = on_complete


class _ThreadQueue:
    """One thread's local task deque. push/pop at the right, steal at the left."""

    __slots__ = ("lock", "tasks")

    def __init__(self):
        self.lock = threading.Lock()
        self.tasks: deque[_Task] = deque()

    def push(self, task: _Task) -> None:
        with self.lock:
            self.tasks.append(task)

    def pop_newest(self) -> _Task | None:
        with self.lock:
            return self.tasks.pop() if self.tasks else None

    def steal_oldest(self) -> _Task | None:
        with self.lock:
            return self.tasks.popleft() if self.tasks else None

    def pop_scope(self, scope: TaskScope) -> _Task | None:
        """Remove the newest task belonging to ``scope``, skipping others."""
        with self.lock:
            for i in range(len(self.tasks) - 1, -1, -1):
                if self.tasks[i].scope is scope:
                    task = self.tasks[i]
                    del self.tasks[i]
                    return task
        return None

    def __len__(self) -> int:
        with self.lock:
            return len(self.tasks)


class WorkStealingPool:
    """Shared executor: ``n_workers`` threads plus helping submitters.

    Thread safety: ``submit`` and ``wait`` may be called concurrently from any
    thread, including from inside running tasks. ``threads_busy`` counts
    distinct threads currently inside at least one task frame (workers and
    helping waiters alike), which is the executor-level occupancy the stall
    monitor reports next to module-level occupancy.
    """

    _IDLE_WAIT_S = 0.02
    _HELP_WAIT_S = 0.002

    def __init__(self, n_workers: int, *, name: str = "pool"):
        if n_workers < 1:
            raise ValueError(f"n_workers must be >= 1, got {n_workers}")
        self.n_workers = n_workers
        self.name = name
        self.provenance = ProvenanceLog()
        self._queues: dict[int, _ThreadQueue] = {}
        self._queues_lock = threading.Lock()
        self._victims: tuple[_ThreadQueue, ...] = ()
        self._work = threading.Condition()
        self._stopping = False
        self._local = threading.local()
        self._busy_lock = threading.Lock()
        self._busy = 0
        self.started = time.perf_counter()
        self._workers = [
            threading.Thread(target=self._worker_loop, name=f"{name}-w{i}", daemon=True)
            for i in range(n_workers)
        ]
        for t in self._workers:
            t.start()

    # --- queue registry ---------------------------------------------------

    def _own_queue(self) -> _ThreadQueue:
        q = getattr(self._local, "queue", None)
        if q is None:
            q = _ThreadQueue()
            with self._queues_lock:
                self._queues[threading.get_ident()] = q
                self._victims = tuple(self._queues.values())
            self._local.queue = q
        return q

    def _steal(self, exclude: _ThreadQueue | None) -> _Task | None:
        for q in self._victims:
            if q is exclude:
                continue
            task = q.steal_oldest()
            if task is not None:
                return task
        return None

    # --- lifecycle ----------------------------------------------------------

    def scope(self, label: str = "") -> TaskScope:
        return TaskScope(next(_scope_ids), label)

    def submit(
        self,
        scope: TaskScope,
        fn: Callable[[], None],
        *,
        module: str | None = None,
        kind: str = TASK_KIND_PLAIN,
        on_complete: Callable[[], None] | None = None,
    ) -> None:
        """Queue one task. ``on_complete`` runs on the executing thread after
        the task's timed window closes (its provenance record is already
        written), which keeps follow-up scheduling out of measured intervals.
        """
        if self._stopping:
            raise LifecycleError("submit after shutdown")
        task = _Task(fn, scope, module, kind, on_complete)
        scope._task_created()
        self._own_queue().push(task)
        with self._work:
            self._work.notify()

    def wait(self, scope: TaskScope, *, isolation: bool = True) -> None:
        """Block until every task in ``scope`` has finished, helping meanwhile.

        With ``isolation`` the calling thread only executes tasks that belong
        to ``scope``; without it the caller behaves like an idle worker and
        may execute any pending task, including foreign ones.
        """
        own = self._own_queue()
        while True:
            if isolation:
                task = own.pop_scope(scope)
            else:
                task = own.pop_newest() or self._steal(own)
            if task is not None:
                self._execute(task)
                continue
            with scope._cond:
                if scope._pending == 0:
                    break
                scope._cond.wait(self._HELP_WAIT_S)
        if scope.first_error is not None:
            raise scope.first_error

    def run_all(
        self,
        fns: Iterable[Callable[[], None]],
        *,
        label: str = "",
        isolation: bool = True,
        kind: str = TASK_KIND_PLAIN,
        module: str | None = None,
    ) -> None:
        """Submit a batch from the calling thread and wait for it."""
        scope = self.scope(label)
        for fn in fns:
            self.submit(scope, fn, module=module, kind=kind)
        self.wait(scope, isolation=isolation)

    def shutdown(self) -> None:
        with self._work:
            self._stopping = True
            self._work.notify_all()
        for t in self._workers:
            t.join()

    def __enter__(self) -> "WorkStealingPool":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # --- execution ----------------------------------------------------------

    @property
    def threads_busy(self) -> int:
        with self._busy_lock:
            return self._busy

    def _execute(self, task: _Task) -> None:
        depth = getattr(self._local, "depth", 0)
        self._local.depth = depth + 1
        if depth == 0:
            with self._busy_lock:
                self._busy += 1
        error: BaseException | None = None
        drained = task.scope.first_error is not None
        t_start = time.perf_counter()
        try:
            if not drained:
                task.fn()
        except BaseException as exc:
            error = exc
        t_end = time.perf_counter()
        if not drained:
            self.provenance.append(
                ProvenanceRecord(
                    task_id=task.task_id,
                    scope_id=task.scope.scope_id,
                    scope_label=task.scope.label,
                    module=task.module,
                    kind=task.kind,
                    thread=threading.current_thread().name,
                    t_start=t_start - self.started,
                    t_end=t_end - self.started,
                )
            )
        self._local.depth = depth
        if depth == 0:
            with self._busy_lock:
                self._busy -= 1
        if task.on_complete is not None:
            try:
                task.on_complete()  # runs even for drained tasks: it is bookkeeping
            except BaseException as exc:
                if error is None:
                    error = exc
        task.scope._task_finished(error)

    def _worker_loop(self) -> None:
        own = self._own_queue()
        while True:
            task = own.pop_newest() or self._steal(own)
            if task is not None:
                self._execute(task)
                continue
            with self._work:
                if self._stopping:
                    return
                self._work.wait(self._IDLE_WAIT_S)
