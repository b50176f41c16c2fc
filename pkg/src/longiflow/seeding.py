"""Counter-based random streams.

Every consumer of randomness derives its own Philox generator from a root
seed plus a stream label, so adding or reordering one consumer never
shifts the draws of another.  Stream ids are built as purpose * 2^32 +
index, giving each purpose four billion per-item substreams.
"""

from __future__ import annotations

import numpy as np

# purpose codes; keep stable, they are part of the reproducibility contract
INIT = 1
DATA_GEN = 2
MISSINGNESS = 3
SHUFFLE = 4
LOSS_DRAWS = 5
VALIDATION = 6
EVAL = 7
PSEUDO_INIT = 8


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, purpose, index)."""
    if index < 0 or index >= 2 ** 32:
        raise ValueError(f"stream index {index} out of range")
    return np.random.Generator(np.random.Philox(key=[seed, (purpose << 32) + index]))
