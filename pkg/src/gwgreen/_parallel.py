"""Slot-deterministic thread pool helper.

Workers write into preallocated per-index slots, so results are positional
and the outcome is independent of thread count and scheduling.  Reductions
over the slot arrays must use a fixed-order sum (np.sum) afterwards.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def default_threads() -> int:
    return os.cpu_count() or 1


def run_indexed(fn, n: int, threads: int | None = None) -> None:
    """Call fn(i) for i in range(n).  fn must only write to slot i of
    preallocated output arrays; return values are discarded."""
    if threads is None:
        threads = default_threads()
    if threads <= 1 or n <= 1:
        for i in range(n):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        chunk = max(1, n // (threads * 8))
        # list() to propagate worker exceptions
        list(pool.map(fn, range(n), chunksize=chunk))
