"""Deterministic seed derivation.

Every source of randomness in a run is a numpy Generator obtained from
`rng(root, *labels)`. The labels name the purpose ("rollout", iteration 3,
member 7, ...), so adding a new consumer never shifts the streams of
existing ones, and two runs with the same root seed draw identical values.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root: int, *labels: int | str) -> int:
    """Derive a stable 63-bit seed from a root seed and purpose labels."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng(root: int, *labels: int | str) -> np.random.Generator:
    """A PCG64 generator keyed by (root, labels)."""
    return np.random.Generator(np.random.PCG64(child_seed(root, *labels)))
