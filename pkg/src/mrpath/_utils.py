"""Small shared utilities."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    """Worker cap from MRPATH_THREADS (default 1)."""
    raw = os.environ.get("MRPATH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Map ``fn`` over ``items``, results in input order.

    Uses a process pool when more than one worker is allowed; otherwise runs
    inline.  Output order is fixed by the input order, so results are
    identical regardless of worker count.
    """
    items = list(items)
    if workers is None:
        workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
