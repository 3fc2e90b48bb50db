"""Seeded Gaussian noise with a pinned algorithm.

Raw 64-bit words come from numpy's PCG64 bit generator (its output stream is
stable across numpy versions and platforms). They are turned into uniforms in
(0, 1) from the top 53 bits and into normals with the Box-Muller transform,
so nothing depends on numpy's sampler internals.
"""
import hashlib

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _bitgen(seed):
    return np.random.PCG64(np.random.SeedSequence(seed))


def uniform(n, seed):
    """``n`` uniforms strictly inside (0, 1)."""
    raw = _bitgen(seed).random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def normal(shape, seed):
    """Standard normal array of ``shape`` from an integer (or int-sequence) seed."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u = uniform(2 * pairs, seed)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape)


def text_seed(text):
    """Stable 64-bit seed derived from a string."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
