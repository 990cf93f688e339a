"""
Counter-based random streams

Every random draw in a run comes from a Philox generator keyed by
(seed, purpose, *indices), so a batch, chain or epoch always sees the same
numbers no matter the execution order, the worker it runs on, or whether
the run was resumed from a checkpoint.
"""

from typing import Sequence, Tuple

import numpy as np

# Stream purposes
INIT = 1
WARM_START = 2
CHAIN_NOISE = 3
REVERSE_EPS = 4
SHUFFLE = 5
ANCESTRAL = 6
EVALUATION = 7
DATA = 8


def stream_generator(seed: int, *key: int) -> np.random.Generator:
    """Philox generator keyed by (seed, *key)"""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(key=seq.generate_state(2, dtype=np.uint64)))


class ChainNoise:
    """One Philox stream per chain so chains can be split across workers"""

    def __init__(self, seed: int, key: Sequence[int], chain_ids: Sequence[int]):
        self.chain_ids = np.asarray(chain_ids, dtype=int)
        self._generators = [stream_generator(seed, *key, cid) for cid in self.chain_ids]

    def standard_normal(self, shape: Tuple[int, int]) -> np.ndarray:
        n_chains, dim = shape
        if n_chains != len(self._generators):
            raise ValueError(f"noise requested for {n_chains} chains, stream holds {len(self._generators)}")
        return np.stack([g.standard_normal(dim) for g in self._generators])
