"""Named, splittable random streams.

Every stochastic component of a run (instance generation, parameter init,
per-batch action sampling, validation sets) draws from its own stream so the
streams are independent and individually reproducible.

Stream construction: a stream named by a string plus integer indices maps to
``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=key)))`` where
``key = (crc32(name), *indices)``. SeedSequence spawn keys are a stable,
documented part of numpy, so the same (seed, name, indices) always yields the
same stream on any platform.
"""

import zlib

import numpy as np


def stream(seed, name, *indices):
    """Deterministic Generator for the stream (name, *indices) under seed."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
