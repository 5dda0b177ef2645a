"""Named seed streams.

Every source of randomness in the pipeline draws from a stream derived as
SHA-256(master seed, *stream parts). Adding a new subsystem with its own
stream name never perturbs the draws of existing ones, which is what makes
whole runs bit-reproducible from a single config seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *stream: object) -> int:
    """Derive a 64-bit seed for the stream named by ``stream`` parts."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for part in stream:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def stream_rng(master: int, *stream: object) -> np.random.Generator:
    """A fresh PCG64 generator seeded from the named stream."""
    return np.random.default_rng(derive_seed(master, *stream))
