"""Counter-based random streams.

Every replica of every experiment owns an independent Philox stream whose
key is derived from ``(seed, experiment tag, replica index)`` through
:class:`numpy.random.SeedSequence`. Replica ``k`` can therefore be replayed
in isolation without generating replicas ``0 .. k-1``.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "replica_streams", "tag_key", "kernel_seed"]


def tag_key(tag: str) -> int:
    """Stable 32-bit integer for an experiment tag."""
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")


def stream(seed: int, *key) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an arbitrary integer/str path."""
    spawn = tuple(tag_key(k) if isinstance(k, str) else int(k) for k in key)
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn)
    return np.random.Generator(np.random.Philox(ss))


def replica_streams(seed: int, tag: str, n: int):
    """Generators for replicas ``0 .. n-1`` of experiment ``tag``."""
    return [stream(seed, tag, k) for k in range(n)]


def kernel_seed(rng: np.random.Generator) -> int:
    """Draw a seed for a compiled kernel that keeps its own generator state."""
    return int(rng.integers(0, 2**31 - 1))
