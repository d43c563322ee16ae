"""Ordered parallel map over tensors."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    """READAPT_THREADS if set, otherwise the number of available cores."""
    configured = os.environ.get("READAPT_THREADS")
    if configured:
        try:
            return max(1, int(configured))
        except ValueError:
            logger.warning("ignoring non-integer READAPT_THREADS=%r", configured)
    return os.cpu_count() or 1


def map_ordered(
    fn: Callable[[T], R],
    items: Iterable[T],
    threads: Optional[int] = None,
    desc: str = "",
    progress: bool = False,
) -> List[R]:
    """
    Apply fn to every item, possibly in parallel, keeping input order.

    numpy releases the GIL inside its BLAS/LAPACK kernels, so a thread pool
    parallelizes the per-tensor work without copying tensors between processes.

    Args:
        fn: Pure function of one item
        items: Work items
        threads: Worker cap; None uses default_threads()
        desc: Progress bar label
        progress: Show a tqdm bar on stderr

    Returns:
        Results in the order of items
    """
    items = list(items)
    workers = min(threads or default_threads(), max(len(items), 1))
    bar = tqdm(total=len(items), desc=desc, disable=not progress, leave=False)
    try:
        if workers <= 1:
            results = []
            for item in items:
                results.append(fn(item))
                bar.update(1)
            return results
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, item) for item in items]
            results = []
            for future in futures:
                results.append(future.result())
                bar.update(1)
            return results
    finally:
        bar.close()
