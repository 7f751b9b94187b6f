"""Order-preserving parallel map over sample chunks."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def default_workers() -> int:
    return os.cpu_count() or 1


def chunk_bounds(n: int, workers: int, min_chunk: int = 16) -> list[tuple[int, int]]:
    """Split ``range(n)`` into contiguous chunks, at most a few per worker."""
    if n <= 0:
        return []
    k = max(1, min(n // max(1, min_chunk), 4 * max(1, workers)))
    edges = [round(i * n / k) for i in range(k + 1)]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_chunks(fn, n: int, workers: int = 1, min_chunk: int = 16) -> list:
    """``[fn(a, b) for each chunk]`` in chunk order; threads when ``workers > 1``.

    Results never depend on ``workers``: every sample is processed by the same
    vectorised arithmetic whatever chunk it falls in, and the fold is in order.
    """
    bounds = chunk_bounds(n, workers, min_chunk) if workers > 1 else [(0, n)]
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
