"""Fixed-size pixel blocks evaluated sequentially or on a thread pool."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK = 256


def map_blocks(fn, n_items: int, chunk_size: int = DEFAULT_CHUNK, workers: int = 1):
    """Apply ``fn(slice)`` to consecutive blocks and concatenate each output field.

    ``fn`` returns a tuple of arrays whose first axis indexes items. Block
    boundaries depend only on ``chunk_size``, never on ``workers``, so the
    result is identical however many threads run.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    blocks = [slice(i, min(i + chunk_size, n_items)) for i in range(0, n_items, chunk_size)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, blocks))
    else:
        parts = [fn(b) for b in blocks]
    return tuple(np.concatenate(field) for field in zip(*parts))
