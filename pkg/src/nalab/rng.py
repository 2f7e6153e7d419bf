"""Deterministic PRNG: xoshiro256** seeded via splitmix64.

A single `Rng` holds the four 64-bit words of xoshiro256** state. Scalar
draws step that state directly. Bulk draws (`uniform_block`, `normal_block`)
consume one scalar draw as a sub-seed and expand it through a counter-form
splitmix64 stream, which vectorizes cleanly in numpy while staying
bit-reproducible from the seed alone.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1CE4E5B9
_SM64_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# 2^-53, maps the top 53 bits of a u64 onto [0, 1)
_U64_TO_UNIT = 1.0 / (1 << 53)


def splitmix64_mix(z: int) -> int:
    """Output function of splitmix64 applied to a single 64-bit state word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _SM64_MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _SM64_MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance splitmix64 once; returns (new_state, output)."""
    state = (state + _SM64_GAMMA) & MASK64
    return state, splitmix64_mix(state)


def fnv1a(text: str) -> int:
    """64-bit FNV-1a hash of a UTF-8 string; stable stream labels."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def derive_seed(master: int, *labels: int | str) -> int:
    """Mix a master seed with labels into a child seed.

    Each label (int, or string hashed via FNV-1a) is folded in through the
    splitmix64 output function, so distinct label paths give decorrelated
    streams.
    """
    z = master & MASK64
    for label in labels:
        key = fnv1a(label) if isinstance(label, str) else (label & MASK64)
        z = splitmix64_mix((z + _SM64_GAMMA) & MASK64)
        z = splitmix64_mix(z ^ key)
    return z


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _sm64_block(key: int, n: int) -> np.ndarray:
    """n outputs of splitmix64 seeded at `key`, as uint64, vectorized.

    splitmix64's state after i steps is key + i*GAMMA, so the whole block is
    the output mix applied to a counter, with no sequential dependency.
    """
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(key) + np.uint64(_SM64_GAMMA) * idx
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """xoshiro256** stream, seeded from a 64-bit seed via splitmix64."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        state = self.seed
        words = []
        for _ in range(4):
            state, out = splitmix64_next(state)
            words.append(out)
        if not any(words):  # all-zero state is the one forbidden xoshiro state
            words[0] = 1
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * _U64_TO_UNIT

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        threshold = (MASK64 + 1) - (MASK64 + 1) % n
        while True:
            x = self.next_u64()
            if x < threshold:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_block(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1) as float64 from one sub-seeded splitmix64 run."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        key = self.next_u64()
        bits = _sm64_block(key, n)
        return (bits >> np.uint64(11)).astype(np.float64) * _U64_TO_UNIT

    def normal_block(self, n: int, std: float = 1.0, trunc_sigmas: float | None = None) -> np.ndarray:
        """n N(0, std^2) draws via Box-Muller; optional resampling beyond ±trunc_sigmas."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        out = self._standard_normal(n)
        if trunc_sigmas is not None:
            bad = np.abs(out) > trunc_sigmas
            while bad.any():
                out[bad] = self._standard_normal(int(bad.sum()))
                bad = np.abs(out) > trunc_sigmas
        return out * std

    def _standard_normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform_block(2 * m)
        # u1 shifted into (0, 1] so log() is finite
        u1 = 1.0 - u[:m]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def state(self) -> dict:
        return {"seed": self.seed, "words": list(self._s)}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng._s = [w & MASK64 for w in state["words"]]
        return rng
