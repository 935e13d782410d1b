"""Counter-based random streams that do not depend on how work is partitioned.

Work over ``n`` items is cut into fixed blocks of ``BLOCK`` items. Block ``k``
of stream ``name`` always draws from ``Philox(SeedSequence(seed, spawn_key=(name, k)))``,
so results are bit-identical for any number of workers.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 8192
WORKERS_ENV = "RYDTOF_WORKERS"


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def block_rng(seed: int, stream: str, block: int, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_stream_key(stream), int(block), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))


def map_blocks(func, n: int, seed: int, stream: str, *extra: int, workers: int | None = None) -> list:
    """Call ``func(rng, start, stop)`` for every block; results in block order."""
    starts = range(0, n, BLOCK)
    jobs = [(block_rng(seed, stream, k, *extra), s, min(s + BLOCK, n)) for k, s in enumerate(starts)]
    nw = worker_count(workers)
    if nw == 1 or len(jobs) < 2:
        return [func(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=nw) as pool:
        return list(pool.map(lambda job: func(*job), jobs))
