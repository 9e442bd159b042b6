"""Deterministic random streams.

Every stochastic decision in the package draws from a counter-based Philox
generator keyed by (seed, stream path). Streams are independent of thread
count and call order, and can be reconstructed from scratch at any point,
which is what makes checkpoint resume bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_word(part: int | str) -> int:
    """Map one stream-path component to a stable 64-bit word."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the Philox generator for a named substream.

    `seed` is the user-facing 64-bit seed; `path` names the substream
    (e.g. stream(seed, "boot-perturb", iteration, camera_id)). The same
    (seed, path) always yields the same generator state, independent of
    any other stream having been used.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_path_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
