"""Named random streams derived from one 64-bit seed.

Every consumer asks for ``stream(seed, "fold", 3, "stage1")`` style keys, so
any fold or stage can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(name) -> int:
    return int.from_bytes(hashlib.sha256(str(name).encode("utf-8")).digest()[:4], "little")


def stream(seed: int, *names) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = tuple(_word(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
