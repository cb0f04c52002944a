"""Named, counter-based random streams (Philox) keyed by replicate seed."""

import zlib

import numpy as np


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return np.random.Generator(np.random.Philox(ss))
