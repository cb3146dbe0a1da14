"""Deterministic seed derivation.

Every random draw in graphbridge comes from a ``numpy.random.Generator``
built from a ``SeedSequence`` whose entropy is the run seed plus a tuple
of integer keys (block index, iteration, direction...). Two draws with the
same keys are bit-identical no matter which thread or process makes them.
"""
import typing as T

import numpy as np

BLOCK_SIZE = 256

FORWARD = 0
BACKWARD = 1


def derive_seed(seed: int, *keys: int) -> int:
    "Collapse a seed and integer keys into one 63-bit seed"
    sequence = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generator_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    )


def blocks(count: int, block_size: int = BLOCK_SIZE) -> T.List[T.Tuple[int, int, int]]:
    "Split ``count`` trajectories into (block_index, start, stop) triples"
    return [
        (index, start, min(start + block_size, count))
        for index, start in enumerate(range(0, count, block_size))
    ]
