"""Random streams and worker-pool helpers.

All randomness comes from counter-based Philox generators keyed by integer
tuples such as ``(seed, stage, round)``. Work that is farmed out to threads
never consumes randomness, so results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "SLOPPY_REDUCE_THREADS"


def rng(*key: int) -> np.random.Generator:
    """A Philox stream identified by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def n_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def map_rows(fn, rows: np.ndarray, min_chunk: int = 256) -> np.ndarray:
    """Apply a row-batched ``fn`` over ``rows``, possibly split across threads.

    ``fn`` must be pure and treat rows independently; the concatenated output
    is then identical for any worker count.
    """
    workers = n_workers()
    n = rows.shape[0]
    if workers == 1 or n < 2 * min_chunk:
        return fn(rows)
    n_chunks = min(workers, n // min_chunk)
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    parts = [rows[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        out = list(pool.map(fn, parts))
    return np.concatenate(out, axis=0)
