"""SplitMix64 generator: tiny, seedable, and identical on every platform."""

from __future__ import annotations

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix(self.state)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return lo + r % span

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        vals = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        return (lo + (hi - lo) * vals).reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape)) if len(shape) else 1
        u1 = 1.0 - self.uniform_array((n,))
        u2 = self.uniform_array((n,))
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)


def derive_seed(*parts: int) -> int:
    """Combine integers into one 64-bit seed (order-sensitive)."""
    h = 0x243F6A8885A308D3
    for p in parts:
        h = _mix((h ^ (int(p) & _MASK)) + _GAMMA & _MASK)
    return h


def xavier_uniform(rng: SplitMix64, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(shape or (fan_in, fan_out), -limit, limit)
