"""Per-path random streams and an order-preserving thread pool."""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

import numpy as np
from tqdm import tqdm  # https://github.com/tqdm/tqdm

log = logging.getLogger("streams")

T = TypeVar("T")


def path_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for path `index` under `master_seed`.

    >>> a = path_rng(7, 3).random(2)
    >>> b = path_rng(7, 3).random(2)
    >>> bool((a == b).all()), bool((a == path_rng(7, 4).random(2)).any())
    (True, False)
    """
    if master_seed < 0 or index < 0:
        raise ValueError("seeds and path indices must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def parallel_map(
    fn: Callable[[int], T],
    n: int,
    threads: int = 1,
    desc: str | None = None,
    progress: bool = False,
) -> list[T]:
    """Return [fn(0), ..., fn(n-1)], computed on `threads` workers.

    Results are placed by index, so anything reduced from them is the same
    for every thread count.
    """
    if n < 0:
        raise ValueError(f"cannot map over {n} items")
    bar = tqdm(total=n, desc=desc, disable=not progress, leave=False)
    try:
        if threads <= 1:
            out = []
            for index in range(n):
                out.append(fn(index))
                bar.update()
            return out
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = []
            for result in pool.map(fn, range(n)):
                out.append(result)
                bar.update()
            return out
    finally:
        bar.close()
