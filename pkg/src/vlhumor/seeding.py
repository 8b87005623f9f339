"""Named deterministic RNG streams derived from a single root seed.

All randomness in a run flows from one integer seed through labelled
sub-streams (``data``, ``augment``, ``init``, ...), so any component can be
re-derived independently of execution order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np

_PREFIX = b"vlh1:"


def derive_seed(root: int, *labels) -> int:
    """Stable 64-bit seed for the sub-stream named by ``labels``."""
    key = _PREFIX + repr((int(root),) + tuple(labels)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")

def stream(root: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))


def torch_seed(root: int, *labels) -> int:
    # torch.manual_seed is happiest with non-negative int64
    return derive_seed(root, *labels) & 0x7FFF_FFFF_FFFF_FFFF
