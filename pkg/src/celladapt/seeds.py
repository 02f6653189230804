"""Deterministic seed substreams.

All randomness in the pipeline flows from one root seed, split into named
substreams so that each stage (training, negative synthesis, scoring, ...)
draws from an independent, reproducible stream. Resuming a run re-derives
the exact same streams without replaying earlier stages.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(root_seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for the substream named by ``tags`` under ``root_seed``."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.SeedSequence(entropy)


def rng(root_seed: int, *tags) -> np.random.Generator:
    """Seeded numpy generator for the named substream."""
    return np.random.Generator(np.random.PCG64(substream(root_seed, *tags)))


def torch_seed(root_seed: int, *tags) -> int:
    """63-bit integer seed for torch RNGs, derived from the named substream."""
    state = substream(root_seed, *tags).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
