"""Keyed, counter-based random streams.

Every random decision in training is drawn from a Philox generator whose key
is derived from a tuple such as ``(seed, "mask", epoch, image_index)``. The
same key always yields the same stream, independent of the order in which
streams are created, so batches can be built in any order or on any thread.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError(f"stream key parts must be non-negative, got {value}")
    return value & _MASK64


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``."""
    entropy = [_word(seed)] + [_word(p) for p in path]
    key = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
