"""Reproducible random streams.

Every stream is keyed by ``(master seed, stream id, block index)``, so a
block of trajectories draws the same numbers whichever worker runs it and
in whatever order blocks are scheduled.
"""

from __future__ import annotations

import numpy as np

BLOCK = 1000

# stream ids
ENSEMBLE_A = 0
ENSEMBLE_B = 1
ANALYSIS = 2
TUNING = 3
COUPLING = 4
CHECKS = 5


def generator(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))))


def blocks(n: int, size: int = BLOCK) -> list[tuple[int, int, int]]:
    """``(block index, start, stop)`` covering ``range(n)``."""
    return [(b, lo, min(lo + size, n)) for b, lo in enumerate(range(0, n, size))]
