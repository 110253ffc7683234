"""Counter-based random streams derived from a single run seed."""

import numpy as np

# Named stream ids so that independent consumers never share a generator
DATA = 1
INIT = 2
BATCH = 3
PROBE = 4
UNBIASED = 5
ORACLE = 6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Build a Philox generator for `seed` and the given stream path.

    The same (seed, stream) always yields the same sequence on every platform.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
