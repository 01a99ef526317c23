"""Named random substreams derived from one global seed.

Each stage (suite, shots, sgd, mask, ...) draws from its own stream so changing
one stage's consumption never perturbs another.
"""

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    key = [int(seed)] + [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(key))
