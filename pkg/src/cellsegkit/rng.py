"""Named, splittable random streams.

Every stochastic component draws from ``stream(seed, name, *keys)``; the
name and keys are hashed into a ``SeedSequence`` so a stream depends only on
what it is for, never on how many other streams were drawn before it.
"""
import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name, *keys):
    """PCG64 generator for the sub-stream ``name`` indexed by integer ``keys``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name)]
    for k in keys:
        if isinstance(k, str):
            k = _name_key(k)
        entropy.append(int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
