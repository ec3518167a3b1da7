"""Deterministic named random streams.

Every stochastic choice in the library draws from a stream addressed by
(master seed, purpose string), so independent pieces of a pipeline can be
reseeded or reordered without perturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master_seed: int, name: str) -> int:
    """Stable 64-bit seed derived from a master seed and a purpose string."""
    digest = hashlib.sha256(f"{master_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream. Same (seed, name) -> same draws."""
    return np.random.default_rng(child_seed(master_seed, name))
