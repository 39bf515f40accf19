"""Deterministic pseudo-random number generation.

All randomness in the package flows through :class:`Rng`, a xoshiro256++
generator seeded via splitmix64.  The exact stream is pinned so generated
problem instances are reproducible from a 64-bit seed alone:

* splitmix64 is run from the seed to produce ``4 * LANES`` state words;
  lane ``j`` receives words ``4j .. 4j+3``.
* All ``LANES`` xoshiro256++ lanes advance in lockstep; outputs are
  interleaved round-robin (step ``t`` emits lane ``0 .. LANES-1``).
* Uniform doubles in [0, 1) are ``(word >> 11) * 2**-53``.
* Standard normals come from Box-Muller pairs: words ``2i`` and ``2i+1``
  yield ``r*cos(a)`` and ``r*sin(a)`` with ``r = sqrt(-2 ln u1)``,
  ``u1 = ((word_2i >> 11) + 1) * 2**-53`` and ``a = 2*pi*u2``,
  ``u2 = (word_2i+1 >> 11) * 2**-53``.
* Bounded integers are ``floor(uniform * bound)`` (bound well below 2**53).

Consumers that need several independent streams derive child seeds with
:func:`derive_seed`, which folds integer or string tags into the parent
seed through splitmix64.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

LANES = 64


def _splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of splitmix64 started at `seed`."""
    out = np.empty(count, dtype=np.uint64)
    state = seed & _MASK
    for i in range(count):
        state = (state + _GOLDEN) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        z = z ^ (z >> 31)
        out[i] = z
    return out


def derive_seed(seed: int, *tags: int | str) -> int:
    """Fold tags into `seed`, yielding an independent child seed."""
    x = seed & _MASK
    for tag in tags:
        if isinstance(tag, str):
            # FNV-1a over UTF-8 bytes
            h = 0xCBF29CE484222325
            for b in tag.encode("utf-8"):
                h = ((h ^ b) * 0x100000001B3) & _MASK
            w = h
        else:
            w = tag & _MASK
        x = (x ^ w) & _MASK
        x = (x + _GOLDEN) & _MASK
        x = ((x ^ (x >> 30)) * _MIX1) & _MASK
        x = ((x ^ (x >> 27)) * _MIX2) & _MASK
        x = x ^ (x >> 31)
    return int(x)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """Seedable xoshiro256++ stream (see module docstring for the layout)."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        words = _splitmix64_stream(self.seed, 4 * LANES)
        state = words.reshape(LANES, 4).T.copy()
        self._s0, self._s1, self._s2, self._s3 = state
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def _block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return out

    def u64(self, n: int) -> np.ndarray:
        """Next `n` raw 64-bit words."""
        avail = self._buf.size - self._pos
        if avail < n:
            steps = -(-(n - avail) // LANES)
            fresh = np.empty((steps, LANES), dtype=np.uint64)
            for i in range(steps):
                fresh[i] = self._block()
            self._buf = np.concatenate([self._buf[self._pos:], fresh.reshape(-1)])
            self._pos = 0
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        """Uniform doubles in [low, high); scalar when shape is None."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if low != 0.0 or high != 1.0:
            u = low + (high - low) * u
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def normal(self, shape=None):
        """Standard normal doubles via Box-Muller; scalar when shape is None."""
        n = 1 if shape is None else int(np.prod(shape))
        pairs = -(-n // 2)
        w = self.u64(2 * pairs)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        a = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(a)
        z[1::2] = r * np.sin(a)
        z = z[:n]
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound)."""
        return min(int(self.uniform() * bound), bound - 1)

    def choose(self, n: int, k: int) -> np.ndarray:
        """`k` distinct indices from range(n), uniform without replacement."""
        idx = np.arange(n)
        for i in range(k):
            j = i + self.below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choose(n, n)

    def orthogonal(self, n: int) -> np.ndarray:
        """Random orthogonal matrix: QR of a Gaussian with positive R diagonal."""
        g = self.normal((n, n))
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
