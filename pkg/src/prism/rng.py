"""Seeded random streams.

Every random draw in the package comes from a Philox4x64-10 counter-based
generator (numpy's ``Philox`` bit generator).  A stream is keyed by the
global seed plus a tuple of labels naming its purpose, so e.g. the data
stream and the model-init stream never share state, and adding a new
consumer never shifts the draws of an existing one.

The 128-bit Philox key is ``(seed mod 2**64, H(labels))`` where ``H`` is the
first 8 bytes (little-endian) of the BLAKE2b digest of the labels joined by
``"/"``.  Both pieces are platform independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_key(labels: tuple) -> int:
    text = "/".join(str(x) for x in labels).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for ``(seed, *labels)``."""
    key = np.array([int(seed) & _MASK64, _label_key(labels)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed derived from ``(seed, *labels)``."""
    return int(stream(seed, "derive", *labels).integers(0, 2**63 - 1))
