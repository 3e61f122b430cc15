"""Deterministic random streams.

Every stream is a numpy ``Generator`` over the Philox-4x64 counter-based bit
generator, keyed by ``SeedSequence([master_seed, crc32(purpose_tag), index])``.
Identical ``(master_seed, purpose_tag, index)`` triples give identical streams
on every platform numpy supports.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_code(purpose_tag: str) -> int:
    return zlib.crc32(purpose_tag.encode("utf-8"))


def stream(master_seed: int, purpose_tag: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(master_seed), tag_code(purpose_tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed: int, purpose_tag: str, index: int = 0) -> int:
    """A 63-bit integer seed drawn from the stream, for components that take a plain seed."""
    ss = np.random.SeedSequence([int(master_seed), tag_code(purpose_tag), int(index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
