"""Deterministic random-stream plumbing.

All stochastic code takes a ``numpy.random.Generator``.  Substreams are
derived with ``SeedSequence`` spawn keys so that a replicate's stream depends
only on (root seed, named path), never on worker count or batch order.
"""

from __future__ import annotations

import numpy as np

# fixed tags for the top-level phases of a run
TAG_HELDOUT = 0
TAG_TRAIN = 1
TAG_GIBBS = 2
TAG_DATA = 3
TAG_METRICS = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream identified by an integer path.

    Same (seed, path) always yields the same stream; distinct paths are
    statistically independent.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n fresh child generators of ``rng`` (counter-based, order-stable)."""
    return rng.spawn(n)
