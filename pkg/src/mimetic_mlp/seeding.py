"""Named RNG sub-streams derived from a single run seed.

Each stream is keyed by ``(seed, crc32(tag))``, so adding a new tag never
shifts the draws of an existing one.
"""

import zlib

import numpy as np

STREAMS = ("init", "init.mlp_mean", "shuffle", "augment", "data")


def stream_seed(seed: int, tag: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(tag.encode()),))


def stream_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, tag))
