"""Small numeric helpers: deterministic per-id hashing and seed derivation."""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(z):
    """Vectorized splitmix64 finalizer over a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def unit_uniform(seed: int, ids) -> np.ndarray:
    """One uniform in [0, 1) per id, from a documented hash of (seed, id).

    Order-independent: the draw for an id depends only on (seed, id), so
    cohort-level results do not depend on execution or storage order.
    """
    h = splitmix64(np.asarray(ids, dtype=np.uint64) ^ splitmix64(np.uint64(seed % (1 << 64))))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derived_seed(*parts) -> int:
    """Collapse integer parts into one stable 63-bit seed."""
    acc = np.uint64(0)
    for p in parts:
        acc = splitmix64(acc ^ np.uint64(int(p) % (1 << 64)))
    return int(acc >> np.uint64(1))
