"""Bounded worker pool over independent work items.

Work items (budget, seed) cells carry their own derived seeds, so
outputs are identical whatever the worker count; parallelism only
changes wall time. The pool size comes from the MFSBI_WORKERS
environment variable, defaulting to the logical core count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    env = os.environ.get("MFSBI_WORKERS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError("MFSBI_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


def pool_map(fn, items, workers=None) -> list:
    """Ordered map. workers == 1 runs inline (no subprocess, picklable or
    not); more workers fan out over processes."""
    items = list(items)
    if workers is None:
        workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
