"""Seedable, splittable random streams.

Every stochastic operation in the package takes an explicit seed and
derives a Philox (counter-based) generator from it.  Sub-streams are
split by integer paths, so nested loops (epoch, batch, example) get
independent, reproducible streams without any shared mutable state.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "derive_seed"]


def stream(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for ``seed`` split by an integer path.

    The same (seed, path) always yields the same stream; distinct paths
    yield statistically independent streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Stable 63-bit sub-seed for handing to APIs that want an int seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
