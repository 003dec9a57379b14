"""Seed handling helpers shared across modules."""

import numpy as np


def as_generator(seed_or_rng) -> tuple[np.random.Generator, int | None]:
    """Return ``(generator, seed)`` from an int seed or an existing generator.

    When an integer is passed the seed is returned alongside the generator so
    callers can record it; an already-constructed generator yields ``None``
    for the seed.
    """
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng, None
    seed = int(seed_or_rng)
    return np.random.default_rng(seed), seed


def derive_seed(base_seed: int, *indices: int) -> int:
    """Deterministically derive a sub-seed from a base seed and index path.

    Plain integer arithmetic (no hashing state) so logs stay reproducible and
    the derivation is auditable.
    """
    seed = int(base_seed)
    for idx in indices:
        seed = (seed * 1_000_003 + int(idx) * 7_919 + 101) % (2**31 - 1)
    return seed
