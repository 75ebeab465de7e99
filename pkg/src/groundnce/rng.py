"""Seeded random-number substreams.

All randomness in the package flows from a single integer seed through
named substreams, so changing e.g. the shuffling order never disturbs the
weight initialization. Substream keys are derived from stable SHA-256
digests of the names, not Python's salted ``hash``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(part: object) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: object) -> np.random.Generator:
    """Return a generator for the substream identified by ``names``.

    Identical (seed, names) pairs yield identical streams on every
    platform and run.
    """
    entropy = [_key(seed)] + [_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))
