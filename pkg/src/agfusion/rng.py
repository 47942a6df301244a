"""Counter-based random numbers: value = mix(seed, stream, index).

Each draw depends only on (seed, stream, index), never on call order, so
scenes are reproducible piecewise and across platforms.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix64(x) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to uint64 input (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive(seed: int, *labels: int) -> int:
    """Deterministic sub-seed from a parent seed and integer labels."""
    with np.errstate(over="ignore"):
        key = np.array([seed & _MASK], dtype=np.uint64)
        for label in labels:
            key = splitmix64(key ^ splitmix64(np.array([label & _MASK], dtype=np.uint64)))
    return int(key[0])


def uniform(seed: int, stream: int, n: int, offset: int = 0) -> np.ndarray:
    """n doubles in [0, 1) with 53 random bits each."""
    key = np.uint64(derive(seed, stream))
    with np.errstate(over="ignore"):
        idx = np.arange(offset, offset + n, dtype=np.uint64)
        bits = splitmix64(idx ^ key) if n else np.zeros(0, np.uint64)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def normal(seed: int, stream: int, n: int) -> np.ndarray:
    """n standard normals by Box-Muller on paired uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - uniform(seed, stream, m)            # (0, 1]
    u2 = uniform(seed, stream, m, offset=m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]
