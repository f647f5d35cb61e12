"""Counter-based random streams keyed by (seed, scenario, replicate).

Each replicate gets its own Philox stream: the 128-bit key is built from the
master seed and the scenario index, and the replicate index occupies a
dedicated word of the 256-bit counter. Streams therefore do not depend on
which worker evaluates a replicate or in what order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngPolicy:
    master_seed: int = 20190101
    stream_scheme: str = "philox-counter"

    def __post_init__(self):
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must be a 64-bit unsigned value")

    def generator(self, scenario_index: int, replicate: int) -> np.random.Generator:
        key = np.array([self.master_seed & MASK64, scenario_index & MASK64], dtype=np.uint64)
        counter = np.array([0, replicate & MASK64, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=key))


def chunk_ranges(n: int, n_chunks: int):
    n_chunks = max(1, min(n_chunks, n))
    edges = np.linspace(0, n, n_chunks + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_replicates(fn, n_reps: int, threads: int = 1):
    """Apply ``fn(start, stop)`` over replicate chunks and concatenate in index order."""
    ranges = chunk_ranges(n_reps, threads * 4 if threads > 1 else 1)
    if threads <= 1:
        parts = [fn(a, b) for a, b in ranges]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda r: fn(*r), ranges))
    return parts
