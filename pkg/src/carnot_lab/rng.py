"""Deterministic, order-independent random streams.

Every stream is a Philox (counter-based) generator keyed by a SeedSequence
built from the master seed and an integer key path, e.g.
``stream(seed, STAGE_SDE, stream_id, block)``.  Two different key paths never
share a state, and no stream depends on how many other streams were drawn
before it, so results do not depend on thread count or execution order.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["stream", "block_slices", "thread_count", "BLOCK_SIZE"]

# Ensembles are generated in fixed-size blocks, one stream per block.
BLOCK_SIZE = 1024


def stream(seed: int, *key: int) -> np.random.Generator:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def block_slices(n: int, block: int = BLOCK_SIZE):
    """Yield (block_index, slice) pairs covering range(n)."""
    for b, start in enumerate(range(0, n, block)):
        yield b, slice(start, min(start + block, n))


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return default
