"""Seeded random streams with a fixed, documented algorithm.

Raw bits come from PCG64 (numpy's bit generator, whose output stream is
stable across numpy versions and platforms).  All distributions are derived
here from the raw 64-bit words rather than through ``numpy.random.Generator``
methods, whose algorithms numpy reserves the right to change:

* uniform: ``(word >> 11) * 2**-53`` in ``[0, 1)``, then affinely mapped;
* normal: Box-Muller on consecutive word pairs ``(u1, u2)`` with
  ``r = sqrt(-2 ln(1 - u1))``, yielding ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``;
* permutation: stable argsort of ``n`` uniforms.

Child seeds are derived with ``numpy.random.SeedSequence(seed, spawn_key=keys)``.
"""

from __future__ import annotations

import numpy as np

_TWO_53 = 1.0 / 9007199254740992.0


def derive_seed(seed, *keys):
    """Deterministic 64-bit child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


class Rng:
    """A reproducible random stream.

    >>> a, b = Rng(3), Rng(3)
    >>> bool((a.uniform(size=4) == b.uniform(size=4)).all())
    True
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def spawn(self, *keys):
        return Rng(derive_seed(self.seed, *keys))

    def words(self, n):
        return self._bits.random_raw(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * _TWO_53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, mean=0.0, std=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        w = (self.words(2 * pairs) >> np.uint64(11)).astype(np.float64) * _TWO_53
        u1, u2 = w[0::2], w[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = mean + std * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n):
        return np.argsort(self.uniform(size=n), kind="stable")
