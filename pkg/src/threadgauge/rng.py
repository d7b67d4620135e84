"""Counter-based random substreams.

Every randomized replicate draws from its own Philox stream keyed by
``(seed, label)`` and positioned by the replicate index, so results do not
depend on how replicates are scheduled across workers.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_MASK64 = (1 << 64) - 1


def label_code(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream_key(seed: int, label: str) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & _MASK64, label_code(label)])
    return ss.generate_state(2, dtype=np.uint64)


def substream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Generator for replicate ``index`` of the stream named ``label``.

    The index sits in the high words of the 256-bit Philox counter; draws
    advance the low word, so distinct indices never overlap.
    """
    counter = np.array([0, 0, int(index) & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label), counter=counter))


def resolve_jobs(jobs: int | None = None) -> int:
    if jobs is None:
        env = os.environ.get("THREADGAUGE_JOBS", "").strip()
        jobs = int(env) if env else 1
    return max(1, int(jobs))


def map_replicates(fn: Callable[[int], T], n: int, jobs: int | None = 1) -> list[T]:
    """Evaluate ``fn(i)`` for i in range(n); output order is always by index."""
    jobs = resolve_jobs(jobs)
    if jobs == 1 or n < 2:
        return [fn(i) for i in range(n)]
    chunks: Sequence[range] = [range(s, min(s + 256, n)) for s in range(0, n, 256)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda r: [fn(i) for i in r], chunks))
    return [v for part in parts for v in part]
