"""Deterministic fan-out of independent work items over a process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence


def default_threads() -> int:
    """Worker count from ``ETEL_THREADS`` (1 when unset or invalid)."""
    try:
        return max(1, int(os.environ.get("ETEL_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """``[fn(x) for x in items]`` computed serially or in worker processes.

    Results always come back in input order, so anything assembled from them
    does not depend on the number of workers.
    """
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, size: int) -> list[range]:
    """Consecutive index ranges of length ``size`` covering ``range(n)``."""
    size = max(1, int(size))
    return [range(i, min(i + size, n)) for i in range(0, n, size)]
