"""Named, splittable random streams.

A stream is a PCG64 generator seeded from ``SeedSequence(seed, spawn_key)``
where the spawn key is the CRC-32 of each path component (integers are used
as-is). Any two distinct names give independent streams, and a pipeline step
can be replayed on its own from the root seed and its name.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed, *names):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))


def generator(seed, *names):
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))
