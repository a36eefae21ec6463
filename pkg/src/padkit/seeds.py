"""Deterministic RNG derivation.

All randomness in the toolkit flows from a single root seed through named
substreams, so results are reproducible regardless of which components run
or in which order workers are scheduled.
"""

import hashlib

import numpy as np


def derive_seed(root_seed: int, *keys) -> int:
    """Derive a 64-bit seed from a root seed and a tuple of stream keys."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(root_seed: int, *keys) -> np.random.Generator:
    """Independent numpy Generator for the substream named by ``keys``."""
    return np.random.default_rng(derive_seed(root_seed, *keys))
