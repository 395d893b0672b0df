"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np

PHANTOM = "phantom"
DEGRADE = "degrade"
ATLAS = "atlas"
INIT = "init"
PATCHES = "patches"
BATCHES = "batches"


def stream_key(name: str) -> int:
    """Stable integer key for a stream name."""
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for sub-stream `name` (optionally indexed) of `seed`.

    Distinct names or indices give statistically independent, non-overlapping streams.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(name), *index))
    return np.random.default_rng(sequence)
