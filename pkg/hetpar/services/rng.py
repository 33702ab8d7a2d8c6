"""Deterministic splitmix64 generator and the seed-offset scheme."""

from typing import List, MutableSequence, TypeVar

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

T = TypeVar("T")


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SeededRng:
    """splitmix64 stream with portable bounded draws and shuffles.

    Every draw is a fixed function of the 64-bit state, so two generators
    built from the same seed produce the same stream on any platform.
    """

    def __init__(self, seed: int):
        """Initialize the generator with a 64-bit seed (wrapped)."""
        self.state = seed & MASK64

    def next_u64(self) -> int:
        """Advance the state and return the next 64-bit output."""
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """
        Draw ``n`` consecutive outputs at once.

        The k-th output only depends on ``state + k * GAMMA``, so the block is
        computed with wrapping uint64 arithmetic and equals ``n`` calls to
        ``next_u64``.

        Args:
            n: Number of outputs

        Returns:
            uint64 array of length n
        """
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)

        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))

        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def bounded(self, n: int) -> int:
        """
        Draw an integer in [0, n) as the high 64 bits of ``next_u64 * n``.

        Args:
            n: Exclusive upper bound, at least 1

        Returns:
            Integer in [0, n)
        """
        if n <= 0:
            raise ValueError(f"Bound must be positive, got {n}")
        return (self.next_u64() * n) >> 64

    def random(self) -> float:
        """Draw a float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def random_array(self, n: int) -> np.ndarray:
        """Draw ``n`` floats in [0, 1), identical to ``n`` calls to ``random``."""
        raw = self.next_u64_array(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform_array(self, n: int, low: float, high: float) -> np.ndarray:
        """Draw ``n`` floats uniformly in [low, high)."""
        return low + (high - low) * self.random_array(n)

    def normal_array(self, n: int) -> np.ndarray:
        """Draw ``n`` standard normal floats with the Box-Muller transform."""
        pairs = (n + 1) // 2
        u = self.random_array(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1]
        u2 = u[pairs:]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
        return z[:n]

    def shuffle(self, items: MutableSequence[T]) -> MutableSequence[T]:
        """Shuffle in place with Fisher-Yates and return the sequence."""
        for i in range(len(items) - 1, 0, -1):
            j = self.bounded(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> List[int]:
        """Return a shuffled ``list(range(n))``."""
        return list(self.shuffle(list(range(n))))


def derived_rng(base_seed: int, offset: int) -> SeededRng:
    """
    Build a fresh generator seeded with ``base_seed + offset`` (wrapping).

    The base generator is never touched, so "setting the seed back" after a
    random process is implicit: every process draws from its own instance.

    Args:
        base_seed: Run seed S
        offset: Structural offset, e.g. epoch N or N + P

    Returns:
        A new SeededRng
    """
    return SeededRng((base_seed + offset) & MASK64)
