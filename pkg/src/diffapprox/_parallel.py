"""Deterministic chunked map over path indices."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK = 4096

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def chunks(paths, chunk_size: int = DEFAULT_CHUNK):
    paths = np.asarray(paths, dtype=np.int64)
    return [paths[i : i + chunk_size] for i in range(0, paths.size, chunk_size)]


def map_chunks(fn, paths, chunk_size: int = DEFAULT_CHUNK, threads: int | None = None):
    """Apply ``fn`` to fixed-size chunks of ``paths``; results come back in chunk order.

    Chunk boundaries depend only on ``chunk_size``, never on the worker count,
    so per-path results are identical for any number of threads.
    """
    parts = chunks(paths, chunk_size)
    n = get_threads() if threads is None else max(1, int(threads))
    if n == 1 or len(parts) == 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, parts))
