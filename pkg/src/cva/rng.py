"""Counter-based, key-addressable random streams.

Every random draw in the package comes from a generator keyed by a tuple of
non-negative integers, e.g. ``(seed, volume_id, crop_index)``. The underlying
bit generator is Philox, so a stream depends only on its key and never on the
order in which other streams were consumed.
"""

from __future__ import annotations

import zlib

import numpy as np

# stable tags so that streams for different purposes never collide
_TAGS: dict[str, int] = {}


def tag(name: str) -> int:
    """Stable 32-bit integer for a purpose label (crc32, not Python's hash)."""
    if name not in _TAGS:
        _TAGS[name] = zlib.crc32(name.encode("utf-8"))
    return _TAGS[name]


def keyed_rng(*key: int | str) -> np.random.Generator:
    parts = []
    for k in key:
        if isinstance(k, str):
            parts.append(tag(k))
        else:
            k = int(k)
            if k < 0:
                raise ValueError(f"rng key components must be non-negative, got {k}")
            parts.append(k)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(parts)))
