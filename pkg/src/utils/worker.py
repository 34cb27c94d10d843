"""
Worker implementation for running independent tasks in parallel.
"""
from typing import Any, Callable, Iterable, List, Optional

from joblib import Parallel, delayed

from src.utils.logging import get_logger

logger = get_logger(__name__)


class BatchWorker:
    """
    Runs a function over a batch of independent items.

    Results always come back in input order. Tasks must carry their own
    seeds, which makes the output identical for any ``n_jobs``; ``n_jobs=1``
    runs in-process and is the reference mode used by the tests.
    """

    def __init__(self, n_jobs: int = 1, label: str = "batch",
                 progress: Optional[Callable[[int, str], None]] = None):
        self.n_jobs = n_jobs if n_jobs else 1
        self.label = label
        self.progress = progress
        self.is_cancelled = False

    def map(self, fn: Callable[..., Any], items: Iterable[Any]) -> List[Any]:
        """
        Apply ``fn`` to every item.

        Args:
            fn: A picklable callable taking one item.
            items: The work items.

        Returns:
            list: One result per item, in input order. Items skipped after a
            cancellation are returned as None.
        """
        items = list(items)
        total = len(items)
        if total == 0:
            return []

        logger.debug(f"{self.label}: {total} task(s) on {self.n_jobs} worker(s)")
        if self.n_jobs == 1 or total == 1:
            results = []
            for i, item in enumerate(items):
                if self.is_cancelled:
                    logger.warning(f"{self.label}: cancelled after {i}/{total} task(s)")
                    results.extend([None] * (total - i))
                    break
                self._report(int(100 * i / total), f"{self.label} {i + 1}/{total}")
                results.append(fn(item))
            self._report(100, f"{self.label} completed")
            return results

        results = Parallel(n_jobs=self.n_jobs)(delayed(fn)(item) for item in items)
        self._report(100, f"{self.label} completed")
        return list(results)

    def cancel(self) -> None:
        """Stop scheduling further sequential tasks."""
        self.is_cancelled = True

    def _report(self, percent: int, message: str) -> None:
        if self.progress is not None:
            self.progress(percent, message)
