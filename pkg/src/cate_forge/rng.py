"""Reproducible random sub-streams.

Every random quantity is drawn from its own PCG64 stream whose seed
sequence is ``SeedSequence(seed, spawn_key=key)``; ``key`` names the
purpose (``"site"``, ``"target"``, ...) and the replication/site indices.
Purpose strings are hashed with CRC-32 so keys stay small integers and
identical on every platform.  Normal variates use the inverse CDF on
53-bit uniforms strictly inside (0, 1), so they never depend on numpy's
internal normal sampler.
"""

import zlib

import numpy as np
from scipy.special import ndtri

_TWO53 = float(2 ** 53)


def _key_part(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("sub-stream indices must be non-negative")
    return part


def substream(seed, *key):
    """Generator for the sub-stream ``key`` of the root ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def uniforms(gen, size):
    """Uniforms on the open interval (0, 1), 53-bit resolution."""
    k = gen.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) / _TWO53


def normals(gen, size, loc=0.0, scale=1.0):
    return loc + scale * ndtri(uniforms(gen, size))
