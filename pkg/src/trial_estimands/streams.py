"""Counter-based random substreams.

A substream is addressed by a master seed plus an integer key, so any replication or
patient block can be regenerated independently of how work is split across workers.
"""

from collections.abc import Iterator

import numpy as np

# Patients generated per substream
BLOCK_SIZE = 256


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator over a Philox bit generator for ``(seed, *key)``."""
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("Seeds and stream keys must be non-negative")
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def blocks(n: int, block_size: int = BLOCK_SIZE) -> Iterator[tuple[int, int, int]]:
    """Yield (block index, start, stop) covering ``range(n)``."""
    for index, start in enumerate(range(0, n, block_size)):
        yield index, start, min(start + block_size, n)
