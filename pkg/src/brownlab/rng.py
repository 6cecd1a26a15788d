"""Counter-based random streams.

Every sampling routine takes an integer master seed and derives independent
substreams keyed by (seed, purpose, index) through the Philox counter-based
bit generator.  Stream identity depends only on the key, never on draw order,
so results are reproducible and independent of batching or worker count.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# Purpose tags keep substreams of one run disjoint.  Values are arbitrary
# but frozen: changing them changes every seeded result.
TAG_WALK = 1
TAG_SOLVE = 2
TAG_INNER = 3
TAG_RESAMPLE = 4
TAG_ARMS = 5
TAG_INIT = 6


def stream(seed, tag=0, index=0):
    """Independent Generator keyed by (seed, tag, index).

    tag and index must fit in 32 bits each; they are packed into the second
    Philox key word.
    """
    if not 0 <= tag < (1 << 32):
        raise ValueError(f"tag out of range: {tag}")
    if not 0 <= index < (1 << 32):
        raise ValueError(f"index out of range: {index}")
    key = np.array([seed & _MASK64, (tag << 32) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def walk_states(seed, tag, index, count):
    """Nonzero 2x64-bit xorshift states for `count` jitted walk kernels."""
    g = stream(seed, tag, index)
    states = g.integers(1, _MASK64, size=(count, 2), dtype=np.uint64)
    return states


def seed_from(rng_or_seed):
    """Normalize an integer seed or a Generator into an integer seed."""
    if isinstance(rng_or_seed, (int, np.integer)):
        return int(rng_or_seed)
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, _MASK64, dtype=np.uint64))
    raise TypeError(f"expected int seed or numpy Generator, got {type(rng_or_seed)!r}")
