"""Named, independent random streams derived from one master seed.

Streams are Philox (counter-based) generators keyed by the master seed and a
label, so adding draws to one stream never shifts another.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "head", "shuffle", "fisher", "synth", "balanced", "split")


def seed_rng(seed: int, label: str, *subkeys: int) -> np.random.Generator:
    key = (zlib.crc32(label.encode("utf-8")),) + tuple(int(k) for k in subkeys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng, label: str = "shuffle") -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return seed_rng(int(rng), label)
