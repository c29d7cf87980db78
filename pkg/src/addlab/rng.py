"""SplitMix64 streams.

All randomness in the package (split sampling, weight init, epoch shuffles,
trial seeds) comes from here so results are bit-reproducible across
platforms.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, lane: int) -> int:
    """Output number ``lane`` (0-based) of a SplitMix64 stream seeded with ``seed``."""
    return mix64((seed + (lane + 1) * GAMMA) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be a u64, got {seed}")
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def block(self, count: int) -> np.ndarray:
        """The next ``count`` outputs as a uint64 array (same values as repeated next_u64)."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + count * GAMMA) & MASK64
        return out

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in (0, 1], 53 bits each."""
        bits = self.block(count) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (1.0 / (1 << 53))

    def normal(self, count: int) -> np.ndarray:
        """Standard normal draws via Box-Muller; both outputs of each pair are used."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return z.reshape(-1)[:count]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n), swapping from the top down."""
        order = list(range(n))
        if n < 2:
            return order
        draws = self.block(n - 1).tolist()
        for t, i in enumerate(range(n - 1, 0, -1)):
            j = draws[t] % (i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]
