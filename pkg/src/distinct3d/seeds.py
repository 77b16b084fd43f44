"""Deterministic derivation of independent RNG streams.

Every stochastic operation takes an explicit numpy Generator. Streams for
sub-tasks (per epoch, per shape, per role) are derived from a base seed and
a tuple of tags, so reordering or parallelizing work cannot perturb draws.
"""

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng tag must be int or str, got {type(tag).__name__}")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return a Generator for stream (seed, *tags), stable across runs."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_seed(seed: int, *tags) -> int:
    """Derive a 32-bit child seed for code that wants an int, not a stream."""
    return int(derive_rng(seed, *tags).integers(0, 2**32))
