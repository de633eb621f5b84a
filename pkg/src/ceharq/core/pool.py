"""Worker pool for trial chunks."""

import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunk_ranges(start: int, stop: int, chunk_size: int) -> list[tuple[int, int]]:
    """Split [start, stop) into contiguous (begin, end) ranges."""
    chunk_size = max(1, chunk_size)
    return [(b, min(b + chunk_size, stop)) for b in range(start, stop, chunk_size)]


def run_tasks(
    fn: Callable[[T], R],
    tasks: Sequence[T],
    workers: int = 1,
    progress: bool = False,
    desc: str = "trials",
) -> list[R]:
    """Run fn over tasks and return the results in task order.

    workers <= 1 runs in-process. Results never depend on the worker count because
    every task derives its randomness from its own trial indices.
    """
    show = progress and sys.stderr.isatty()
    if workers <= 1 or len(tasks) <= 1:
        iterator: Iterable[T] = tqdm(tasks, desc=desc, disable=not show)
        return [fn(task) for task in iterator]

    logger.debug(f"Dispatching {len(tasks)} tasks to {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as executor:
        results = executor.map(fn, tasks)
        return list(tqdm(results, total=len(tasks), desc=desc, disable=not show))
