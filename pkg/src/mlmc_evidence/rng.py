"""Deterministic random streams derived from a single run seed.

Every source of randomness in a run is a named substream addressed by
``(seed, stream id, *indices)``. Streams are backed by the counter-based
Philox generator, so a stream's output depends only on its address, never
on how much any other stream has consumed. That makes replications,
batch members and worker threads reproducible independently of execution
order.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream ids for the top-level substreams of a run.
STREAM_DATA = 0  # synthetic dataset generation
STREAM_BATCH = 1  # batch-level randomness: (data index, level) pairs and latents
STREAM_EVAL = 2  # evaluation metrics during training
STREAM_DIAG = 3  # diagnostics replications
STREAM_CHECK = 4  # gradient-check points


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream of `seed` addressed by `path`.

    Two calls with equal arguments yield generators producing identical
    output; distinct paths are statistically independent.
    """
    key = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(key))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split `rng` into `n` independent child generators.

    Deterministic given the parent's state; children may be consumed in any
    order (or concurrently) without affecting each other.
    """
    return rng.spawn(n)


def stamp(rng: np.random.Generator):
    """Opaque reproducibility token identifying the stream behind `rng`."""
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if seq is None:
        return None
    return (seq.entropy, tuple(seq.spawn_key))
