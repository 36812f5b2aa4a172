"""Chunked dispatch of array work to a thread pool.

Every numerical operator in the package parallelizes by splitting an index
range into disjoint chunks, each writing to a disjoint output region.  The
accumulation order inside a chunk never depends on the worker count, so
results are bit-identical for workers == 1 and workers > 1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

__all__ = ["split_range", "run_chunks"]


def split_range(n: int, pieces: int) -> list[slice]:
    """Split range(n) into up to ``pieces`` contiguous, non-empty slices."""
    bounds = np.linspace(0, n, max(pieces, 1) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_chunks(fn: Callable[[slice], None], chunks: Sequence[slice], workers: int) -> None:
    """Apply ``fn`` to every chunk, using a pool when workers > 1."""
    if workers <= 1 or len(chunks) <= 1:
        for ch in chunks:
            fn(ch)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # materialize to propagate exceptions
        list(pool.map(fn, chunks))
