"""Seed splitting.

Every random stream is derived from a master seed plus a tuple of string
tags: the tags are hashed with CRC32 and used as the ``spawn_key`` of a
``numpy.random.SeedSequence``. Streams with different tags are independent,
so concurrent evaluation never perturbs the training stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed_sequence(seed: int, *tags: str | int) -> np.random.SeedSequence:
    key = tuple(zlib.crc32(str(t).encode()) for t in tags)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *tags)))


def derive_int(seed: int, *tags: str | int) -> int:
    return int(derive_seed_sequence(seed, *tags).generate_state(1, dtype=np.uint32)[0])
