"""Seeded random streams.

Every consumer asks for a generator by ``(seed, stream name)`` so that adding
a new consumer never perturbs the draws of an existing one.
"""
import hashlib

import numpy as np


def _stream_words(stream):
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed, stream=""):
    """Return a PCG64 generator keyed by an integer seed and a stream name."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_stream_words(stream)])
    return np.random.Generator(np.random.PCG64(seq))


def split(rng_seed, *names):
    """Generators for several named sub-streams of one seed."""
    return {name: make_rng(rng_seed, name) for name in names}
