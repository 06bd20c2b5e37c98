"""Deterministic RNG stream derivation.

Every random draw in the simulator comes from a stream addressed by a
(seed, path...) key, so runs are reproducible bit-for-bit and per-agent
streams stay independent of draw order (safe for parallel agents).
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_int(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream addressed by (seed, *path).

    String path parts are hashed with crc32, so tags like "noise" or an
    algorithm name give stable, platform-independent stream keys.
    """
    entropy = [int(seed)] + [_path_int(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
