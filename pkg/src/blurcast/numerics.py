"""
Shared numeric kernels: jittered Cholesky, reparameterized Gaussian sampling,
seeded random streams and finite-difference gradient checking.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exception import DimensionMismatch, NonFiniteValue, NotFactorizable

__all__ = [
    "DEFAULT_JITTER",
    "LowerTriangular",
    "RngStream",
    "cholesky",
    "finite_diff_check",
    "mvn_sample",
]

logger = logging.getLogger(__name__)

DEFAULT_JITTER: tuple[float, ...] = (0.0, 1e-8, 1e-6, 1e-4)

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, slots=True)
class LowerTriangular:
    """Cholesky factor ``L`` with ``L @ L.T == A + jitter * I``."""

    matrix: np.ndarray
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatch(f"factor must be square, got shape {self.matrix.shape}")
        if np.any(np.triu(self.matrix, k=1) != 0.0):
            raise DimensionMismatch("factor has non-zero entries above the diagonal")
        if not np.all(np.diag(self.matrix) > 0.0):
            raise NotFactorizable("factor diagonal must be strictly positive")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(slots=True)
class RngStream:
    """
    Seeded random stream on the counter-based Philox-4x64-10 generator.

    The 128-bit Philox key is ``seed | stream_id << 64`` so that the pair
    ``(seed, stream_id)`` selects one reproducible sequence. A stream is consumed
    sequentially; use :meth:`derive` for independent siblings.
    """

    seed: int
    stream_id: int = 0
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._generator = np.random.Generator(self.bit_generator(self.seed, self.stream_id))

    @staticmethod
    def bit_generator(seed: int, stream_id: int) -> np.random.Philox:
        return np.random.Philox(key=(seed & _MASK64) | ((stream_id & _MASK64) << 64))

    def derive(self, stream_id: int) -> RngStream:
        return RngStream(self.seed, stream_id)

    def standard_normal(self, shape: int | Sequence[int]) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape: int | Sequence[int]) -> np.ndarray:
        return self._generator.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def random_raw(self, count: int) -> np.ndarray:
        """Raw 64-bit words of the underlying bit generator."""
        return self._generator.bit_generator.random_raw(count)


def cholesky(a: np.ndarray, jitter_schedule: Sequence[float] = DEFAULT_JITTER) -> LowerTriangular:
    """
    Factor a symmetric matrix, escalating diagonal jitter until it succeeds.

    The first schedule entry for which ``a + j * I`` is positive definite is used.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-9 * scale):
        raise DimensionMismatch("matrix is not symmetric")
    if not np.all(np.isfinite(a)):
        raise NotFactorizable("matrix has non-finite entries")

    identity = np.eye(a.shape[0])
    for jitter in jitter_schedule:
        try:
            factor = scipy.linalg.cholesky(a + jitter * identity, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.diag(factor) > 0.0):
            continue
        if jitter > 0.0:
            logger.debug(f"Cholesky succeeded with jitter {jitter:g} (n={a.shape[0]})")
        return LowerTriangular(np.tril(factor), float(jitter))
    raise NotFactorizable(f"matrix of size {a.shape[0]} not factorizable with jitter schedule {list(jitter_schedule)}")


def mvn_sample(
    mean: np.ndarray,
    factor: LowerTriangular,
    rng: RngStream,
    *,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draw ``mean + L @ eps`` returning the sample and the ``eps`` used."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (factor.n,):
        raise DimensionMismatch(f"mean has shape {mean.shape}, factor has size {factor.n}")
    if eps is None:
        eps = rng.standard_normal(factor.n)
    elif eps.shape != mean.shape:
        raise DimensionMismatch(f"eps has shape {eps.shape}, expected {mean.shape}")
    return mean + factor.matrix @ eps, eps


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Maximum relative error between ``grad_f`` and central differences of ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64, copy=True).reshape(-1)
    analytic = np.asarray(grad_f(theta.copy()), dtype=np.float64).reshape(-1)
    if analytic.shape != theta.shape:
        raise DimensionMismatch(f"gradient has {analytic.size} entries, parameters have {theta.size}")
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteValue("analytic gradient is not finite")

    worst = 0.0
    for i in range(theta.size):
        shifted = theta.copy()
        shifted[i] = theta[i] + h
        upper = float(f(shifted))
        shifted[i] = theta[i] - h
        lower = float(f(shifted))
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NonFiniteValue(f"function is not finite around coordinate {i}")
        numeric = (upper - lower) / (2.0 * h)
        denominator = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denominator)
    return worst
