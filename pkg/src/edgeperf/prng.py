"""SplitMix64, the portable generator used for seeded trace selection.

Reference test vector (seed 1234567)::

    6457827717110365317, 3203168211198807973, 9817491932198370423,
    4593380528125082431, 16408922859458223821

The algorithm needs only 64-bit wrapping arithmetic, so every language reproduces
the same selection for the same seed.
"""
from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def choice_index(self, n: int) -> int:
        """Index in ``range(n)`` by modular reduction of the next output."""
        if n <= 0:
            raise ValueError("cannot choose from an empty set")
        return self.next() % n

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * 2.0**-53


def derive_seed(seed: int, *path: int) -> int:
    """Independent child seed for ``path`` (e.g. replication index), stable across platforms."""
    state = seed & MASK64
    for p in path:
        state = SplitMix64(state ^ (p & MASK64)).next()
    return SplitMix64(state).next()
