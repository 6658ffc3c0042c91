"""Named random streams derived from one root seed."""

import zlib

import numpy as np


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and a path of labels.

    The same (seed, labels) always yields the same stream, and streams for
    different labels are independent, so adding a component never shifts the
    randomness another component sees.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        words.append(zlib.crc32(str(label).encode()))
    return np.random.default_rng(np.random.SeedSequence(words))
