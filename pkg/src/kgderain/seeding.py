"""Master-seed splitting.

One 64-bit master seed fans out into independent per-purpose streams. The
stream index is the first element of the ``SeedSequence`` spawn key, so the
numbering below is part of the reproducibility contract and must not change.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "mask": 0,
    "crop": 1,
    "init": 2,
    "shuffle": 3,
    "params": 4,
    "heldout": 5,
    "rerain": 6,
}


def stream(seed: int, purpose: str, *sub: int) -> np.random.Generator:
    """Generator for ``purpose`` derived from ``seed``; ``sub`` indexes e.g. images."""
    if purpose not in STREAMS:
        raise KeyError(f"unknown RNG stream {purpose!r}")
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(STREAMS[purpose], *sub))
    return np.random.default_rng(ss)


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))
