"""Seeded random-number streams.

All randomness in the package flows from a single root seed. Independent
subsystems (parameter init, data synthesis, training noise, caption dropout,
samplers) each pull a named substream so that determinism failures can be
isolated to one stream. Stream derivation is pure arithmetic on the seed and
the stream name, so identical (seed, name) pairs yield bit-identical draws on
any platform.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "spawn_item"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the named substream generator for a root seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _name_key(name)])
    return np.random.Generator(np.random.PCG64(ss))


def spawn_item(seed: int, name: str, index: int) -> np.random.Generator:
    """Per-item generator (e.g. one dataset element) under a named stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _name_key(name), int(index)])
    return np.random.Generator(np.random.PCG64(ss))
