"""Counter-based seed derivation: replication i's seed depends only on (master, i)."""

from typing import List

import numpy as np

SEED_BITS = 63


def derive_seed(master: int, index: int, stream: int = 0) -> int:
    if master < 0 or index < 0 or stream < 0:
        raise ValueError(f"seeds and indices must be nonnegative, got {master}, {index}, {stream}")
    state = np.random.SeedSequence([master, stream, index]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32 | int(state[1])) & ((1 << SEED_BITS) - 1)


def derive_seeds(master: int, count: int, stream: int = 0) -> List[int]:
    return [derive_seed(master, i, stream) for i in range(count)]
