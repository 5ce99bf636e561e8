"""Seeded xoshiro256** generator with splitmix64 seeding.

Every random decision in the package flows through :class:`Rng` so that runs
are reproducible bit-for-bit from the integer seeds in the experiment config.
The inner loops are compiled with numba; the state is a 4-word uint64 array.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_TWO_NEG_53 = 1.0 / 9007199254740992.0


def splitmix64(x: int) -> tuple[int, int]:
    """Advance a splitmix64 state. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@njit(cache=True)
def _fill_float(s, out):
    for i in range(out.shape[0]):
        out[i] = np.float64(_next(s) >> np.uint64(11)) * _TWO_NEG_53


@njit(cache=True)
def _bounded(s, n):
    # unbiased: reject draws below 2**64 mod n
    nn = np.uint64(n)
    threshold = (np.uint64(0) - nn) % nn
    while True:
        x = _next(s)
        if x >= threshold:
            return np.int64(x % nn)


@njit(cache=True)
def _fill_bounded(s, n, out):
    for i in range(out.shape[0]):
        out[i] = _bounded(s, n)


@njit(cache=True)
def _fill_bounded_each(s, ns, out):
    for i in range(out.shape[0]):
        out[i] = _bounded(s, ns[i])


@njit(cache=True)
def _shuffle(s, arr):
    for i in range(arr.shape[0] - 1, 0, -1):
        j = _bounded(s, i + 1)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


@njit(cache=True)
def _partial_shuffle(s, arr, k):
    n = arr.shape[0]
    for i in range(k):
        j = i + _bounded(s, n - i)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


@njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - np.float64(_next(s) >> np.uint64(11)) * _TWO_NEG_53
        u2 = np.float64(_next(s) >> np.uint64(11)) * _TWO_NEG_53
        r = np.sqrt(-2.0 * np.log(u1))
        out[i] = r * np.cos(2.0 * np.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * np.sin(2.0 * np.pi * u2)
        i += 2


class Rng:
    """xoshiro256** stream. Single-owner; use :meth:`spawn` for independent streams."""

    def __init__(self, seed: int):
        x = int(seed) & MASK64
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self.seed = int(seed)
        self._s = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._s)

    def next_u64(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def random(self, size=None):
        """Uniform doubles on [0, 1) built from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_float(self._s, out)
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, n: int, size=None):
        """Uniform integers on ``[0, n)``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        count = 1 if size is None else int(np.prod(size))
        out = np.empty(count, dtype=np.int64)
        _fill_bounded(self._s, n, out)
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def integers_each(self, ns) -> np.ndarray:
        """One uniform draw from ``[0, ns[i])`` for every entry of ``ns``."""
        ns = np.asarray(ns, dtype=np.int64)
        if len(ns) and ns.min() < 1:
            raise ValueError("every bound must be >= 1")
        out = np.empty(len(ns), dtype=np.int64)
        _fill_bounded_each(self._s, ns, out)
        return out

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_normal(self._s, out)
        return out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        arr = np.arange(n, dtype=np.int64)
        _shuffle(self._s, arr)
        return arr

    def shuffle(self, arr: np.ndarray) -> np.ndarray:
        """Return a shuffled copy of a 1-D array."""
        idx = self.permutation(len(arr))
        return np.asarray(arr)[idx]

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """Draw ``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        arr = np.arange(n, dtype=np.int64)
        _partial_shuffle(self._s, arr, k)
        return arr[:k].copy()

    def choice_weighted(self, cdf: np.ndarray, size: int) -> np.ndarray:
        """Draw indices with replacement given a cumulative weight vector."""
        u = self.random(size) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, len(cdf) - 1)

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this one's next output."""
        return Rng(int(self.next_u64(1)[0]))
