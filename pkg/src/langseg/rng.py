"""Deterministic counter-based random number generation.

The generator is splitmix64: output i is a fixed 64-bit mix of
``seed + (counter + i) * GOLDEN``. The whole stream is a pure function of
(seed, counter), so identical seeds reproduce identical sequences on any
platform, draws can be vectorised, and the state serializes to two ints.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, matching _mix64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded splitmix64 stream with a serializable (seed, counter) state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words as a uint64 array."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        base = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        return _mix_array(base)

    def random(self) -> float:
        """One double in [0, 1)."""
        return float(self.u64(1)[0] >> np.uint64(11)) * 2.0**-53

    def uniform(self, shape=None, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """float32 array of uniforms in [lo, hi)."""
        if shape is None:
            shape = ()
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        vals = (lo + (hi - lo) * u).astype(np.float32)
        return vals.reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + int(self.u64(1)[0] % np.uint64(span))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(0, len(items) - 1)]

    def split(self, index: int) -> "Rng":
        """Independent child stream; a pure function of (seed, index)."""
        child = _mix64(self.seed ^ _mix64((int(index) & _MASK64) + _GOLDEN))
        return Rng(child)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def __repr__(self):
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"
