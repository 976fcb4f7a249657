"""Counter-based random streams: one independent generator per (seed, check, replicate)."""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List

import numpy as np

__all__ = ["check_key", "replicate_rng", "map_replicates"]


def check_key(name: str) -> int:
    return zlib.crc32(name.encode())


def replicate_rng(seed: int, check: str, replicate: int) -> np.random.Generator:
    """Philox generator keyed by (seed, check) with the replicate index as counter offset.

    Streams for different replicates are disjoint blocks of one counter space,
    so results never depend on how replicates are scheduled.
    """
    bitgen = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, check_key(check)], counter=[0, 0, 0, replicate])
    return np.random.Generator(bitgen)


def _run_block(task, seed, check, start, stop):
    return [task(replicate_rng(seed, check, i), i) for i in range(start, stop)]


def map_replicates(
    task: Callable, n: int, seed: int, check: str, workers: int = 1, block: int = 1000
) -> List:
    """Results of ``task(rng, i)`` for i in range(n), in replicate order.

    With ``workers > 1`` blocks of replicates run in worker processes; the
    task must then be picklable.
    """
    bounds = [(s, min(s + block, n)) for s in range(0, n, block)]
    if workers <= 1 or len(bounds) <= 1:
        out = []
        for s, e in bounds:
            out.extend(_run_block(task, seed, check, s, e))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_block, task, seed, check, s, e) for s, e in bounds]
        out = []
        for fut in futures:
            out.extend(fut.result())
    return out
