"""Seeded, splittable random streams.

All randomness derives from one integer seed. Independent substreams are
keyed by labels hashed with blake2b, so adding a new consumer never shifts
the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *labels: object) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and a label path."""
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        entropy.extend(_label_words(str(label)))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *labels: object) -> int:
    """Stable 63-bit child seed, for handing to code that wants an int."""
    return int(stream(seed, *labels).integers(0, 2**63 - 1))
