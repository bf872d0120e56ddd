"""Named random streams derived from a single root seed.

Each purpose (prior draws, simulator shocks, training shuffles, MH
proposals) gets its own ``SeedSequence`` child keyed by a stable hash of
the stream name, so adding draws to one stage never shifts another.
"""

import zlib

import numpy as np

STREAMS = ("prior", "shocks", "training", "mh", "posterior", "init")


def _key(name):
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}; expected one of {STREAMS}")
    return zlib.crc32(name.encode("ascii"))


def seed_sequence(root, name, *path):
    """``SeedSequence`` for stream ``name`` refined by integer ``path`` (e.g. round, index)."""
    return np.random.SeedSequence(int(root), spawn_key=(_key(name), *(int(p) for p in path)))


def stream(root, name, *path):
    return np.random.default_rng(seed_sequence(root, name, *path))


def int_seed(root, name, *path):
    """A 63-bit integer seed, for APIs that take plain ints (the simulators)."""
    return int(seed_sequence(root, name, *path).generate_state(1, np.uint64)[0] >> np.uint64(1))


def simulation_seeds(root, round_index, n):
    """One shock seed per simulation in a round, in index order."""
    return [int_seed(root, "shocks", round_index, i) for i in range(n)]
