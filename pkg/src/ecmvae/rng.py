"""Explicitly threaded, counter-based random streams.

All stochastic code takes a ``numpy.random.Generator`` argument; nothing reads
global RNG state. Streams are Philox generators keyed by integer tuples so
that e.g. clip ``i`` of corpus seed ``s`` always draws the same numbers,
independent of generation order.
"""
from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def child(rng: np.random.Generator) -> np.random.Generator:
    """Derive an independent stream from ``rng`` (consumes one draw)."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))
