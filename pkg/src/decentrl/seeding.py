"""One root seed, fanned out to consumers by fixed string labels."""

import zlib

import numpy as np


def seed_sequence(seed: int, label: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode()), *extra])


def rng_for(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``label``; stable across runs and platforms."""
    return np.random.default_rng(seed_sequence(seed, label, *extra))
