"""Deterministic RNG streams derived from a master seed."""

import numpy as np


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """
    Return a generator for the stream addressed by ``path`` under ``seed``.

    The same (seed, path) always yields the same stream, independent of how
    many other streams were drawn before it, which keeps pooled work
    deterministic regardless of worker count.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(path)))


# Top-level stream ids, one per consumer of the master seed
STREAM_DATASET = 0
STREAM_SPLIT = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3
STREAM_SEARCH = 4
STREAM_INIT = 5
