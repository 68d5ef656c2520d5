"""Dense arithmetic helpers and the seeded random source shared by all modules.

All arrays are float64.  Randomness comes from :class:`Rng`, a thin wrapper over
numpy's PCG64 bit generator (a fixed, documented 128-bit-state permuted
congruential generator).  Normal draws use numpy's ziggurat sampler.  Given the
same seed and the same sequence of calls, every sample is reproduced exactly.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class Rng:
    """Seedable random source.

    One instance must not be shared between threads; use :meth:`spawn` or
    :func:`derive_seed` to hand independent streams to workers.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, lo: float, hi: float, size=None):
        # an interval holding a single representable float is degenerate
        if not lo < hi or np.nextafter(lo, hi) >= hi:
            raise ValueError(f"empty or degenerate range [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream (advances this stream)."""
        return Rng(int(self._gen.integers(0, 2**63 - 1)))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic 63-bit seed from a master seed and integer keys."""
    ss = np.random.SeedSequence([int(master), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


def sample_uniform(rng: Rng, lo: float, hi: float) -> float:
    """One draw from [lo, hi)."""
    return float(rng.uniform(lo, hi))


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a
