"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed, name, *extra):
    """Independent generator for ``(seed, name, *extra)``.

    Stable across processes and Python versions (crc32, not ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(seed, name, *extra):
    return int(stream(seed, name, *extra).integers(0, 2**63 - 1))
