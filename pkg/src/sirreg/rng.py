"""Deterministic random-stream splitting.

A single root seed is expanded into independent Philox streams keyed by a
component name and an integer index.  The key is the first 16 bytes of
``sha256("<component>|<root_seed>|<index>")``, so adding parallelism or
reordering draws never changes the numbers a given (component, index) pair
produces.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, component: str, index: int = 0) -> np.ndarray:
    """128-bit Philox key for one (seed, component, index) stream."""
    digest = hashlib.sha256(f"{component}|{root_seed}|{index}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def stream_rng(root_seed: int, component: str, index: int = 0) -> np.random.Generator:
    """Generator for one independent stream under the splitting rule."""
    return np.random.Generator(np.random.Philox(key=stream_key(root_seed, component, index)))


def derive_seed(root_seed: int, component: str, index: int = 0) -> int:
    """Fold a (component, index) stream into a new 64-bit root seed."""
    digest = hashlib.sha256(f"seed|{component}|{root_seed}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
