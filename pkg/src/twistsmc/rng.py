"""Deterministic random-stream splitting.

Every run owns a counter-based root stream (Philox).  Independent substreams
are derived from integer keys rather than by sequential spawning, so work
executed in any order, or on any worker, draws the same numbers for the same
key.  Training schemes key substreams by (iteration, time, role), which is
what makes reordered-but-equivalent schemes produce bit-identical output.
"""

from __future__ import annotations

import numpy as np

SeedLike = "int | np.random.SeedSequence"


def as_seedseq(seed: int | np.random.SeedSequence) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def substream(seed: int | np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Child seed sequence at an integer key path below `seed`."""
    ss = as_seedseq(seed)
    return np.random.SeedSequence(
        entropy=ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in key)
    )


def generator(seed: int | np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Philox generator for the substream at `key` (or for `seed` itself)."""
    ss = substream(seed, *key) if key else as_seedseq(seed)
    return np.random.Generator(np.random.Philox(ss))
