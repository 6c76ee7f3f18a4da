"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def substream_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for component ``name`` under root ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**31], dtype=np.uint64))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))
