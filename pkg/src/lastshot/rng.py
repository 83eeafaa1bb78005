"""Counter-based random streams.

Each stream is a Philox generator whose key is derived from the run seed plus
a tuple of labels (purpose, index, ...). Streams for different episodes never
share state, so work can be scheduled in any order with identical results.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF] + [_word(x) for x in labels]
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
