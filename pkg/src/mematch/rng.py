"""Named random sub-streams derived from one root seed.

A stream is addressed by (root seed, stream name, *indices), so episode i
of a run can be regenerated without replaying episodes 0..i-1.
"""

import numpy as np

STREAMS = {
    "data": 1,
    "init": 2,
    "episodes": 3,
    "eval": 4,
    "val": 5,
    "export": 6,
}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *map(int, index)))
    return np.random.Generator(np.random.PCG64(seq))
