"""Deterministic random number generation.

Every stochastic path in this package (scene synthesis, pillar subsampling,
weight initialization) draws from the generator defined here, so that a given
seed reproduces results byte-for-byte across runs and platforms.

The generator is xorshift64* (Vigna's multiplier) seeded through one round of
splitmix64. Raw 64-bit outputs map to floats in [0, 1) by taking the top 53
bits. Derived quantities consume the stream in a documented order:

- ``random()``            one u64 draw
- ``normals(n)``          2 * ceil(n / 2) u64 draws (Box-Muller pairs)
- ``randint(n)``          one u64 draw, occasionally more (rejection sampling)
- ``poisson(lam)``        a variable number of draws (Knuth's product method,
                          split into chunks of mean 500 for large ``lam``)
- ``sample_prefix(n, k)`` k randint draws (Fisher-Yates prefix)

State is a single 64-bit word; instances are cheap and independent streams
come from ``spawn``.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


def splitmix64(x: int) -> int:
    """One splitmix64 step: advance ``x`` by the golden gamma and mix."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, label: str) -> int:
    """Stable 64-bit seed from a base seed and a text label.

    Folds each character through splitmix64 so that distinct labels give
    independent streams; used to key per-scene and per-purpose generators off
    one experiment seed.
    """
    h = int(base) & _MASK64
    for ch in label:
        h = splitmix64(h ^ ord(ch))
    return h


class Rng:
    """xorshift64* stream seeded via splitmix64."""

    __slots__ = ("_state", "_seed")

    def __init__(self, seed: int):
        seed = int(seed) & _MASK64
        self._seed = seed
        self._state = splitmix64(seed)
        if self._state == 0:
            self._state = _GOLDEN

    @property
    def seed(self) -> int:
        return self._seed

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; deterministic in (seed, key)."""
        return Rng(splitmix64(self._seed ^ ((int(key) & _MASK64) * _GOLDEN & _MASK64)))

    def u64(self) -> int:
        s = self._state
        s ^= s >> 12
        s ^= (s << 25) & _MASK64
        s ^= s >> 27
        self._state = s
        return (s * 0x2545F4914F6CDD1D) & _MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.u64() >> 11) * _INV_2_53

    def randoms(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1), consuming n u64 draws."""
        out = np.empty(n, dtype=np.float64)
        s = self._state
        for i in range(n):
            s ^= s >> 12
            s ^= (s << 25) & _MASK64
            s ^= s >> 27
            out[i] = (((s * 0x2545F4914F6CDD1D) & _MASK64) >> 11) * _INV_2_53
        self._state = s
        return out

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint bound must be positive, got %r" % (n,))
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.u64()
            if u < limit:
                return u % n

    def normals(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """n standard-normal draws scaled to N(mu, sigma^2), Box-Muller."""
        m = (n + 1) // 2
        u = self.randoms(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1-u in (0,1], no log(0)
        phi = (2.0 * math.pi) * u[1::2]
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(phi)
        out[1::2] = r * np.sin(phi)
        return mu + sigma * out[:n]

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        return float(self.normals(1, mu, sigma)[0])

    def poisson(self, lam: float) -> int:
        """Poisson draw by Knuth's product method, chunked for large rates."""
        if lam <= 0.0:
            return 0
        total = 0
        while lam > 500.0:
            total += self._poisson_knuth(500.0)
            lam -= 500.0
        return total + self._poisson_knuth(lam)

    def _poisson_knuth(self, lam: float) -> int:
        threshold = math.exp(-lam)
        k = 0
        p = 1.0
        while True:
            p *= self.random()
            if p <= threshold:
                return k
            k += 1

    def sample_prefix(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n) via a Fisher-Yates prefix.

        The result is the first k slots of a partially-shuffled identity
        permutation, which makes subsampling reproducible given the seed.
        """
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n, got k=%d n=%d" % (k, n))
        idx = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.randint(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def shuffle(self, arr: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle along the first axis."""
        n = len(arr)
        for i in range(n - 1):
            j = i + self.randint(n - i)
            arr[[i, j]] = arr[[j, i]]
