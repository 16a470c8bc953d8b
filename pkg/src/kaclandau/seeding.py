"""Deterministic RNG substreams.

Every source of randomness in the package is derived from a single root seed
through named, collision-free substreams, so results are independent of
chunking and thread count.
"""

import numpy as np

# Fixed purpose codes for spawn keys.  Never reuse or renumber.
SIM_RUN = 1
MC_FUNCTIONAL = 2
MIXTURE_SUITE = 3
ESTIMATOR = 4
ORACLE = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the substream named by integer key parts."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
