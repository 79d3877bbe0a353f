"""Counter-based random streams derived from one seed"""
import zlib
from typing import Union

import numpy as np


def _key(tag: Union[str, int]) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, *tags: Union[str, int]) -> np.random.Generator:
    """Philox generator for ``seed`` and a purpose path such as ("noise", step, seq).

    The same seed and tags give the same stream on every platform, independently of how many
    other streams were drawn before.
    """
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(_key(t) for t in tags))
    return np.random.Generator(np.random.Philox(sequence))
