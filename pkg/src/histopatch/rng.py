"""Deterministic, splittable random streams.

Every stochastic choice in the pipeline (weight init, dropout masks, shuffles,
texture synthesis) draws from a counter-based Philox generator keyed by
(seed, call site, call index), so results depend on nothing else — not on
call order, thread timing, or other streams.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive"]


def derive(seed: int, site: str, index: int = 0) -> np.random.Generator:
    """Generator for stream (seed, site, index); same triple, same stream."""
    site_key = zlib.crc32(site.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFFFFFFFFFF, site_key, int(index)))
    return np.random.Generator(np.random.Philox(ss))
