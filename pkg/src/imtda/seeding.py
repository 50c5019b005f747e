"""Named sub-seeds derived from one master seed.

Sub-seeds come from numpy's ``SeedSequence`` keyed by the master seed and a
stable hash of the name, so changing one consumer never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def sub_seed(master: int, *names) -> int:
    """Derive a 63-bit seed for the path ``names`` under ``master``."""
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        entropy.append(_key(n) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def numpy_rng(master: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(sub_seed(master, *names)))


def torch_generator(master: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(sub_seed(master, *names))
    return g
