"""Named deterministic RNG sub-streams derived from one root seed."""

from __future__ import annotations

import numpy as np

_STREAMS = {"data": 1, "init": 2, "variation": 3, "training": 4}

__all__ = ["substream"]


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for a named sub-stream, optionally indexed (epoch, trial, ...).

    Streams are independent of each other and of call order, so sub-systems
    are individually reproducible from (root_seed, name, indices).
    """
    if name not in _STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}; known: {sorted(_STREAMS)}")
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, _STREAMS[name], *map(int, indices)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
