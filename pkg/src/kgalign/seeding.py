"""Named random streams derived from one 64-bit seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the draws seen by another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), zlib.crc32(name.encode("utf-8"))])
