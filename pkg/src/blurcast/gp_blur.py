"""
Learnable Gaussian-process blur.

The blur perturbs a forecast with a draw from a zero-mean GP over normalized
horizon time ``t_i = i / tau``. The GP covariance uses the inducing-point
(Nystrom) approximation and its hyperparameters are trained through the
reparameterized draw and a sparse variational evidence lower bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .exception import DimensionMismatch, InvalidConfig, NonFiniteValue, StaleDraw
from .numerics import DEFAULT_JITTER, RngStream, cholesky

__all__ = [
    "ISO_MAX",
    "BlurDraw",
    "GPParams",
    "blur_backward",
    "blur_covariance",
    "elbo",
    "elbo_and_grad",
    "elbo_backward",
    "horizon_points",
    "isotropic_backward",
    "isotropic_blur",
    "nystrom_cov",
    "rbf_kernel",
    "sample_blur",
]

logger = logging.getLogger(__name__)

ISO_MAX = 0.1


@dataclass(frozen=True, kw_only=True, slots=True)
class GPParams:
    """
    Kernel hyperparameters (log scale), inducing locations and the variational
    distribution ``q(u) = N(var_mean, var_chol @ var_chol.T)``.

    The flat layout is ``[log_l, log_a, log_sigma, inducing (M), var_mean (M),
    tril(var_chol)]`` with the lower triangle taken row by row and its diagonal
    stored as logarithms.
    """

    log_lengthscale: float
    log_amplitude: float
    log_noise: float
    inducing: np.ndarray
    var_mean: np.ndarray
    var_chol: np.ndarray

    def __post_init__(self) -> None:
        m = self.inducing.shape[0]
        if m < 1 or self.var_mean.shape != (m,) or self.var_chol.shape != (m, m):
            raise DimensionMismatch(
                f"inconsistent GP shapes: inducing {self.inducing.shape}, mean {self.var_mean.shape}, chol {self.var_chol.shape}"
            )
        if not np.all(np.diag(self.var_chol) > 0.0):
            raise InvalidConfig("var_chol diagonal must be strictly positive")
        values = [self.log_lengthscale, self.log_amplitude, self.log_noise]
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(self.flatten()))):
            raise NonFiniteValue("GP parameters must be finite")

    @property
    def m(self) -> int:
        return self.inducing.shape[0]

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def amplitude(self) -> float:
        return math.exp(self.log_amplitude)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)

    @staticmethod
    def flat_size(m: int) -> int:
        return 3 + 2 * m + m * (m + 1) // 2

    def flatten(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.m)
        chol = self.var_chol[rows, cols].copy()
        chol[rows == cols] = np.log(chol[rows == cols])
        head = np.array([self.log_lengthscale, self.log_amplitude, self.log_noise])
        return np.concatenate([head, self.inducing, self.var_mean, chol])

    @classmethod
    def unflatten(cls, values: np.ndarray, m: int) -> GPParams:
        if values.shape != (cls.flat_size(m),):
            raise DimensionMismatch(f"GP vector has {values.shape[0]} entries, expected {cls.flat_size(m)} for M={m}")
        rows, cols = np.tril_indices(m)
        entries = values[3 + 2 * m :].copy()
        entries[rows == cols] = np.exp(entries[rows == cols])
        chol = np.zeros((m, m))
        chol[rows, cols] = entries
        return cls(
            log_lengthscale=float(values[0]),
            log_amplitude=float(values[1]),
            log_noise=float(values[2]),
            inducing=values[3 : 3 + m].copy(),
            var_mean=values[3 + m : 3 + 2 * m].copy(),
            var_chol=chol,
        )

    @classmethod
    def initial(
        cls,
        m: int,
        *,
        lengthscale: float = 0.1,
        amplitude: float = 0.1,
        noise: float = 0.01,
        inducing: np.ndarray | None = None,
    ) -> GPParams:
        """Equally spaced inducing points, ``var_mean = 0`` and ``S = K_uu`` so the KL term starts at 0."""
        if inducing is None:
            inducing = (np.arange(m) + 0.5) / m
        kernel_only = cls(
            log_lengthscale=math.log(lengthscale),
            log_amplitude=math.log(amplitude),
            log_noise=math.log(noise),
            inducing=np.asarray(inducing, dtype=np.float64),
            var_mean=np.zeros(m),
            var_chol=np.eye(m),
        )
        k_uu = rbf_kernel(kernel_only.inducing, kernel_only.inducing, kernel_only)
        return cls(
            log_lengthscale=kernel_only.log_lengthscale,
            log_amplitude=kernel_only.log_amplitude,
            log_noise=kernel_only.log_noise,
            inducing=kernel_only.inducing,
            var_mean=kernel_only.var_mean,
            var_chol=cholesky(k_uu).matrix,
        )


@dataclass(frozen=True, kw_only=True, slots=True)
class BlurDraw:
    """
    ``blurred = source + factor @ eps`` along the horizon axis, per channel.

    ``factor`` is the realized (lower-triangular) factor; for the isotropic blur
    it is ``sigma * I`` and may be zero.
    """

    blurred: np.ndarray
    eps: np.ndarray
    factor: np.ndarray
    source: np.ndarray
    psi_vector: np.ndarray | None = None
    sigma: float | None = None


class _Nystrom(NamedTuple):
    k_fu: np.ndarray
    chol_uu: np.ndarray
    a: np.ndarray
    q: np.ndarray


def horizon_points(tau: int) -> np.ndarray:
    return np.arange(tau, dtype=np.float64) / tau


def rbf_kernel(s: np.ndarray, t: np.ndarray, psi: GPParams) -> np.ndarray:
    diff = np.asarray(s, dtype=np.float64)[:, None] - np.asarray(t, dtype=np.float64)[None, :]
    return psi.amplitude**2 * np.exp(-0.5 * (diff / psi.lengthscale) ** 2)


def _rbf_backward(
    s: np.ndarray, t: np.ndarray, kernel: np.ndarray, kernel_bar: np.ndarray, psi: GPParams
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Gradients of ``sum(kernel_bar * K(s, t))`` w.r.t. log-lengthscale, log-amplitude, ``s`` and ``t``."""
    diff = s[:, None] - t[None, :]
    weighted = kernel_bar * kernel
    inv_l2 = 1.0 / psi.lengthscale**2
    g_log_l = float(np.sum(weighted * diff**2) * inv_l2)
    g_log_a = float(2.0 * np.sum(weighted))
    g_s = -np.sum(weighted * diff, axis=1) * inv_l2
    g_t = np.sum(weighted * diff, axis=0) * inv_l2
    return g_log_l, g_log_a, g_s, g_t


def _nystrom(points: np.ndarray, psi: GPParams) -> _Nystrom:
    k_uu = rbf_kernel(psi.inducing, psi.inducing, psi)
    chol_uu = cholesky(k_uu, DEFAULT_JITTER).matrix
    k_fu = rbf_kernel(points, psi.inducing, psi)
    a = scipy.linalg.cho_solve((chol_uu, True), k_fu.T).T
    v = scipy.linalg.solve_triangular(chol_uu, k_fu.T, lower=True)
    return _Nystrom(k_fu=k_fu, chol_uu=chol_uu, a=a, q=v.T @ v)


def nystrom_cov(points: np.ndarray, psi: GPParams) -> np.ndarray:
    """``K_tu K_uu^-1 K_ut`` via a Cholesky solve of the (jittered) inducing kernel."""
    return _nystrom(np.asarray(points, dtype=np.float64), psi).q


def blur_covariance(points: np.ndarray, psi: GPParams) -> np.ndarray:
    return nystrom_cov(points, psi) + psi.noise**2 * np.eye(len(points))


def _check_forecast(y_f: np.ndarray) -> np.ndarray:
    y_f = np.asarray(y_f, dtype=np.float64)
    if y_f.ndim not in (2, 3):
        raise DimensionMismatch(f"forecast must be tau x d_y (optionally batched), got shape {y_f.shape}")
    if not np.all(np.isfinite(y_f)):
        raise NonFiniteValue("forecast contains non-finite values")
    return y_f


def _apply_factor(factor: np.ndarray, eps: np.ndarray) -> np.ndarray:
    # factor acts on the horizon axis (second to last)
    return np.einsum("ij,...jc->...ic", factor, eps)


def sample_blur(y_f: np.ndarray, psi: GPParams, rng: RngStream, *, eps: np.ndarray | None = None) -> BlurDraw:
    """Draw ``Y_B = Y_F + L @ eps`` with ``L L^T = nystrom_cov + sigma^2 I``; channels draw independently."""
    y_f = _check_forecast(y_f)
    tau = y_f.shape[-2]
    factor = cholesky(blur_covariance(horizon_points(tau), psi)).matrix
    if eps is None:
        eps = rng.standard_normal(y_f.shape)
    elif eps.shape != y_f.shape:
        raise DimensionMismatch(f"eps has shape {eps.shape}, forecast has {y_f.shape}")
    return BlurDraw(
        blurred=y_f + _apply_factor(factor, eps),
        eps=eps,
        factor=factor,
        source=y_f,
        psi_vector=psi.flatten(),
    )


def _cholesky_backward(factor: np.ndarray, factor_bar: np.ndarray) -> np.ndarray:
    """Symmetric gradient w.r.t. ``A`` given the gradient w.r.t. ``L = chol(A)``."""
    phi = np.tril(factor.T @ np.tril(factor_bar))
    phi[np.diag_indices_from(phi)] *= 0.5
    left = scipy.linalg.solve_triangular(factor, phi, trans="T", lower=True)
    full = scipy.linalg.solve_triangular(factor, left.T, trans="T", lower=True).T
    return 0.5 * (full + full.T)


def _nystrom_backward(points: np.ndarray, psi: GPParams, parts: _Nystrom, q_bar: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(q_bar * Q)`` for symmetric ``q_bar``, in the flat GP layout."""
    grad = np.zeros(GPParams.flat_size(psi.m))
    k_fu_bar = 2.0 * q_bar @ parts.a
    k_uu_bar = -parts.a.T @ q_bar @ parts.a
    _accumulate_kernel_grads(grad, points, psi, parts, k_fu_bar, k_uu_bar)
    return grad


def _accumulate_kernel_grads(
    grad: np.ndarray,
    points: np.ndarray,
    psi: GPParams,
    parts: _Nystrom,
    k_fu_bar: np.ndarray,
    k_uu_bar: np.ndarray,
) -> None:
    m = psi.m
    g_l, g_a, _, g_z = _rbf_backward(points, psi.inducing, parts.k_fu, k_fu_bar, psi)
    grad[0] += g_l
    grad[1] += g_a
    grad[3 : 3 + m] += g_z
    k_uu = rbf_kernel(psi.inducing, psi.inducing, psi)
    g_l, g_a, g_zs, g_zt = _rbf_backward(psi.inducing, psi.inducing, k_uu, k_uu_bar, psi)
    grad[0] += g_l
    grad[1] += g_a
    grad[3 : 3 + m] += g_zs + g_zt


def blur_backward(
    draw: BlurDraw, upstream: np.ndarray, psi: GPParams, y_f: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradients of ``<upstream, Y_B>`` with ``eps`` held fixed.

    The mean path is the identity, so the forecast gradient equals ``upstream``.
    """
    if draw.psi_vector is None or not np.array_equal(draw.psi_vector, psi.flatten()):
        raise StaleDraw("draw was produced under different GP parameters")
    if draw.source.shape != np.shape(y_f) or upstream.shape != draw.blurred.shape:
        raise StaleDraw(f"draw shape {draw.blurred.shape} does not match forecast {np.shape(y_f)} / upstream")

    tau = draw.blurred.shape[-2]
    points = horizon_points(tau)
    g = upstream.reshape(-1, tau, upstream.shape[-1])
    e = draw.eps.reshape(-1, tau, upstream.shape[-1])
    factor_bar = np.tril(np.einsum("bic,bjc->ij", g, e))
    sigma_bar = _cholesky_backward(draw.factor, factor_bar)

    parts = _nystrom(points, psi)
    grad = _nystrom_backward(points, psi, parts, sigma_bar)
    grad[2] += 2.0 * psi.noise**2 * float(np.trace(sigma_bar))
    return grad, upstream.copy()


def _as_columns(obs: np.ndarray) -> tuple[np.ndarray, float]:
    """Stack channels (and windows) as columns; returns the matrix and the batch scale."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        return obs, 1.0
    if obs.ndim == 3:
        batch, tau, channels = obs.shape
        return obs.transpose(1, 0, 2).reshape(tau, batch * channels), 1.0 / batch
    raise DimensionMismatch(f"observations must be tau x d_y (optionally batched), got shape {obs.shape}")


def _elbo_with_grad(psi: GPParams, obs: np.ndarray, points: np.ndarray | None, want_grad: bool):
    y, scale = _as_columns(obs)
    if not np.all(np.isfinite(y)):
        raise NonFiniteValue("ELBO observations contain non-finite values")
    tau, columns = y.shape
    points = horizon_points(tau) if points is None else np.asarray(points, dtype=np.float64)
    if points.shape != (tau,):
        raise DimensionMismatch(f"{points.shape[0]} horizon points for {tau} observation rows")

    m = psi.m
    parts = _nystrom(points, psi)
    chol_uu, k_fu, a = parts.chol_uu, parts.k_fu, parts.a
    chol_s = psi.var_chol
    s_cov = chol_s @ chol_s.T
    noise_var = psi.noise**2
    amp2 = psi.amplitude**2

    mu = a @ psi.var_mean
    a_s = a @ s_cov
    variance = amp2 - np.sum(a * k_fu, axis=1) + np.sum(a_s * a, axis=1)
    resid = y - mu[:, None]
    sq = float(np.sum(resid**2))
    data = -0.5 * tau * columns * math.log(2.0 * math.pi * noise_var) - (sq + columns * variance.sum()) / (2 * noise_var)

    scaled_s = scipy.linalg.solve_triangular(chol_uu, chol_s, lower=True)
    scaled_m = scipy.linalg.solve_triangular(chol_uu, psi.var_mean, lower=True)
    kl = 0.5 * (
        float(np.sum(scaled_s**2))
        + float(scaled_m @ scaled_m)
        - m
        + 2.0 * float(np.sum(np.log(np.diag(chol_uu))))
        - 2.0 * float(np.sum(np.log(np.diag(chol_s))))
    )
    value = scale * (data - columns * kl)
    if not want_grad:
        return value, None

    grad = np.zeros(GPParams.flat_size(m))
    k_uu_inv = scipy.linalg.cho_solve((chol_uu, True), np.eye(m))

    # data term
    grad[2] += -tau * columns + (sq + columns * variance.sum()) / noise_var
    mu_bar = resid.sum(axis=1) / noise_var
    v_bar = -columns / (2.0 * noise_var)
    m_bar = a.T @ mu_bar
    a_bar = np.outer(mu_bar, psi.var_mean) - v_bar * k_fu + 2.0 * v_bar * a_s
    k_fu_bar = -v_bar * a
    s_bar = v_bar * (a.T @ a)
    grad[1] += tau * v_bar * 2.0 * amp2
    k_fu_bar = k_fu_bar + a_bar @ k_uu_inv
    k_uu_bar = -a.T @ a_bar @ k_uu_inv

    # KL term, weighted by -columns
    k_inv_m = k_uu_inv @ psi.var_mean
    m_bar -= columns * k_inv_m
    s_bar -= 0.5 * columns * k_uu_inv
    k_uu_bar -= 0.5 * columns * (k_uu_inv - k_uu_inv @ s_cov @ k_uu_inv - np.outer(k_inv_m, k_inv_m))

    _accumulate_kernel_grads(grad, points, psi, parts, k_fu_bar, k_uu_bar)
    grad[3 + m : 3 + 2 * m] += m_bar

    chol_bar = np.tril((s_bar + s_bar.T) @ chol_s)
    rows, cols = np.tril_indices(m)
    entries = chol_bar[rows, cols]
    diagonal = rows == cols
    entries[diagonal] = entries[diagonal] * chol_s[rows[diagonal], cols[diagonal]] + columns
    grad[3 + 2 * m :] += entries
    return value, scale * grad


def elbo(psi: GPParams, obs: np.ndarray, points: np.ndarray | None = None) -> float:
    """
    Sparse variational evidence lower bound with a Gaussian likelihood, summed over
    channels; for batched observations the mean over windows.
    """
    value, _ = _elbo_with_grad(psi, obs, points, want_grad=False)
    return float(value)


def elbo_backward(psi: GPParams, obs: np.ndarray, points: np.ndarray | None = None) -> np.ndarray:
    _, grad = _elbo_with_grad(psi, obs, points, want_grad=True)
    return grad


def elbo_and_grad(psi: GPParams, obs: np.ndarray, points: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    value, grad = _elbo_with_grad(psi, obs, points, want_grad=True)
    return float(value), grad


def isotropic_blur(y_f: np.ndarray, sigma: float, rng: RngStream, *, eps: np.ndarray | None = None) -> BlurDraw:
    """``Y_B = Y_F + sigma * eps`` with ``sigma`` clamped to ``[0, 0.1]``."""
    y_f = _check_forecast(y_f)
    sigma = float(np.clip(sigma, 0.0, ISO_MAX))
    if eps is None:
        eps = rng.standard_normal(y_f.shape)
    elif eps.shape != y_f.shape:
        raise DimensionMismatch(f"eps has shape {eps.shape}, forecast has {y_f.shape}")
    tau = y_f.shape[-2]
    return BlurDraw(blurred=y_f + sigma * eps, eps=eps, factor=sigma * np.eye(tau), source=y_f, sigma=sigma)


def isotropic_backward(draw: BlurDraw, upstream: np.ndarray) -> tuple[float, np.ndarray]:
    if draw.sigma is None or upstream.shape != draw.blurred.shape:
        raise StaleDraw("upstream does not match an isotropic draw")
    return float(np.sum(upstream * draw.eps)), upstream.copy()
