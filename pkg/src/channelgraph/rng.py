"""Counter-based random streams keyed by ``(seed, experiment, chunk)``.

Every stream is a Philox generator seeded from
``SeedSequence(seed, spawn_key=(crc32(experiment), chunk))``, so any chunk of
paths can be regenerated alone, in any order, on any worker.
"""
from __future__ import annotations

import zlib

import numpy as np

CHUNK = 1000


def experiment_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, experiment: str = "default", chunk: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(experiment_key(experiment), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def chunks(n: int, size: int = CHUNK) -> list[tuple[int, int]]:
    """``(index, count)`` pairs covering ``n`` items in fixed-size chunks."""
    return [(i, min(size, n - i * size)) for i in range((n + size - 1) // size)]
