"""Named deterministic RNG streams.

Every run hangs off a single integer seed. Components (data generation,
parameter init, training shuffles, attacks) pull from separately derived
streams so that changing how one component consumes randomness never
disturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named component stream of ``seed``."""
    key = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
