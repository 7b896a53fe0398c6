"""Exact samplers used to cross-check PO draws at desk scale.

Neither of these scales: the dense sampler factorizes ``Q`` explicitly, and
the circulant sampler only covers stationary models without decimation.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .linop import DENSE_CAP, LAPLACIAN_KERNEL, kernel_spectrum, to_dense
from .po import FactorModel
from .rng import RandomStream


def dense_precision(model: FactorModel, cap: int = DENSE_CAP) -> np.ndarray:
    Q = to_dense(model.precision, cap=cap)
    return 0.5 * (Q + Q.T)


def dense_moments(model: FactorModel, cap: int = DENSE_CAP):
    """Exact ``(mean, covariance)`` of the model's Gaussian."""
    Q = dense_precision(model, cap)
    cho = _cholesky(Q)
    mean = scipy.linalg.cho_solve(cho, model.mean_rhs())
    cov = scipy.linalg.cho_solve(cho, np.eye(model.n))
    return mean, 0.5 * (cov + cov.T)


def _cholesky(Q):
    try:
        return scipy.linalg.cho_factor(Q, lower=True)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"precision is numerically singular or indefinite: {err}") from None


def exact_sample_dense(model: FactorModel, stream: RandomStream, cap: int = DENSE_CAP) -> np.ndarray:
    """Draw from ``N(Q^{-1} sum M^t R^{-1} m, Q^{-1})`` with a dense Cholesky factor.

    With ``Q = L L^t``, ``x = mu + L^{-t} eps`` has covariance ``Q^{-1}``.
    """
    Q = dense_precision(model, cap)
    c, lower = _cholesky(Q)
    mu = scipy.linalg.cho_solve((c, lower), model.mean_rhs())
    eps = stream.standard_normal_vec(model.n)
    return mu + scipy.linalg.solve_triangular(c, eps, lower=True, trans="T")


def stationary_spectrum(conv_kernel, gamma_n: float, gamma_x: float, shape, lap_kernel=None) -> np.ndarray:
    """Eigenvalues (DFT grid) of ``gamma_n C^t C + gamma_x D^t D``."""
    if lap_kernel is None:
        lap_kernel = LAPLACIAN_KERNEL
    c = kernel_spectrum(conv_kernel, shape)
    d = kernel_spectrum(lap_kernel, shape)
    return gamma_n * np.abs(c) ** 2 + gamma_x * np.abs(d) ** 2


def circulant_sample_oracle(conv_kernel, gamma_n, gamma_x, lap_kernel, shape, stream: RandomStream) -> np.ndarray:
    """Zero-mean draw from ``N(0, Q^{-1})`` for circulant ``C`` and ``D``.

    White noise is filtered by ``spectrum**-0.5`` in the Fourier domain.
    """
    rows, cols = (int(s) for s in shape)
    spec = stationary_spectrum(conv_kernel, gamma_n, gamma_x, (rows, cols), lap_kernel)
    if np.min(spec) <= 1e-14 * np.max(spec):
        raise ValueError("stationary precision has a zero eigenvalue; the target is improper")
    white = stream.standard_normal_vec(rows * cols).reshape(rows, cols)
    x = np.fft.ifft2(np.fft.fft2(white) / np.sqrt(spec)).real
    return x.reshape(-1)
