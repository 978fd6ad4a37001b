"""Worker pool for independent Monte Carlo tasks."""

import logging
import threading
from collections.abc import Callable, Iterable
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from typing import Any, Literal, TypeVar

from .config import RuntimeSettings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ExecutorKind = Literal["thread", "process"]


class WorkerPool:
    """Maps a task over inputs and returns results in input order.

    With one worker tasks run inline in the calling thread. Process pools need a
    module-level (picklable) task.
    """

    def __init__(self, workers: int = 1, executor: ExecutorKind = "thread"):
        """Initialize the pool.

        Args:
            workers: Number of concurrent workers (at least 1)
            executor: "thread" or "process"
        """
        if workers < 1:
            raise ValueError("workers must be at least 1")
        if executor not in ("thread", "process"):
            raise ValueError(f"Unknown executor kind '{executor}'")
        self.workers = workers
        self.executor = executor
        self._lock = threading.Lock()
        self._submitted = 0
        self._completed = 0
        self._failed = 0
        self._closed = False

    @classmethod
    def from_settings(cls, settings: RuntimeSettings) -> "WorkerPool":
        return cls(workers=settings.workers, executor=settings.executor)

    def _make_executor(self) -> Executor:
        if self.executor == "process":
            return ProcessPoolExecutor(max_workers=self.workers)
        return ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="te-worker")

    def _track(self, submitted: int = 0, completed: int = 0, failed: int = 0) -> None:
        with self._lock:
            self._submitted += submitted
            self._completed += completed
            self._failed += failed

    def map(self, task: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Run ``task`` on every item; results keep the order of ``items``.

        Raises:
            RuntimeError: If the pool is closed
            Exception: The first task exception, in input order
        """
        if self._closed:
            raise RuntimeError("Pool is closed")
        inputs = list(items)
        self._track(submitted=len(inputs))

        if self.workers == 1 or len(inputs) <= 1:
            results = []
            for item in inputs:
                try:
                    results.append(task(item))
                except Exception:
                    self._track(failed=1)
                    raise
                self._track(completed=1)
            return results

        logger.debug(f"Dispatching {len(inputs)} tasks to {self.workers} {self.executor} workers")
        with self._make_executor() as pool:
            futures = [pool.submit(task, item) for item in inputs]
            results = []
            for future in futures:
                try:
                    results.append(future.result())
                except Exception:
                    self._track(failed=1)
                    for pending in futures:
                        pending.cancel()
                    raise
                self._track(completed=1)
        return results

    def close(self) -> None:
        self._closed = True

    def stats(self) -> dict[str, Any]:
        """Get pool statistics."""
        with self._lock:
            return {
                "workers": self.workers,
                "executor": self.executor,
                "submitted": self._submitted,
                "completed": self._completed,
                "failed": self._failed,
                "closed": self._closed,
            }
