"""Deterministic seed derivation.

All randomness in the package flows through numpy.random.default_rng (PCG64)
seeded explicitly. Independent substreams (per layer/class/pair cell, per
pipeline stage) are derived by mixing the run seed with integer salts through
numpy.random.SeedSequence, which is stable across platforms and versions.
"""
from __future__ import annotations

import numpy as np


def child_seed(seed: int, *salt: int) -> int:
    """A 32-bit seed for an independent substream identified by salt words."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words.extend(int(s) & 0xFFFFFFFF for s in salt)
    return int(np.random.SeedSequence(words).generate_state(1)[0])
