"""Dense linear algebra and log-domain statistical primitives.

Covariances are plain float64 numpy arrays (row-major). All probability
arithmetic downstream happens in the log domain; these helpers are the only
place where the Gaussian algebra lives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, EmptyInput, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the source matrix."""

    lower: np.ndarray
    dim: int

    @property
    def log_det_sqrt(self) -> float:
        """log sqrt(det) of the factored matrix, i.e. sum log L_ii."""
        return float(np.sum(np.log(np.diag(self.lower))))

    def solve_lower(self, b: np.ndarray) -> np.ndarray:
        """Return L^-1 b (b may be a vector or a (dim, n) matrix)."""
        return solve_triangular(self.lower, b, lower=True, check_finite=False)


def cholesky(a: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix.

    Raises NotPositiveDefinite when a pivot is not strictly positive, which
    signals a degenerate covariance the caller must regularize.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) or 1.0
    if np.max(np.abs(a - a.T)) > 1e-9 * scale:
        raise DimensionMismatch("matrix is not symmetric within 1e-9 relative tolerance")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return CholeskyFactor(lower=lower, dim=a.shape[0])


def cholesky_with_jitter(a: np.ndarray) -> CholeskyFactor:
    """Cholesky with one retry after adding 1e-6 * trace/d to the diagonal.

    Standard jitter for covariances that go numerically indefinite during EM.
    """
    try:
        return cholesky(a)
    except NotPositiveDefinite:
        a = np.asarray(a, dtype=float)
        d = a.shape[0]
        lam = 1e-6 * np.trace(a) / d
        if lam <= 0.0:
            lam = 1e-12
        return cholesky(a + lam * np.eye(d))


def log_sum_exp(v) -> float:
    """log sum exp(v_i) with max-shift; exact for any finite inputs."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("log_sum_exp of empty vector")
    m = np.max(v)
    if not np.isfinite(m):
        # all -inf stays -inf; a +inf or nan propagates
        return float(m + 0.0 if m == -np.inf else m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log_sum_exp for an (n, k) array; rows of all -inf give -inf."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(a - m), axis=-1))
    return out


def gaussian_log_pdf(z: np.ndarray, mean: np.ndarray, cov: CholeskyFactor) -> float:
    """Multivariate normal log density via the Cholesky factor of the covariance."""
    z = np.asarray(z, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if z.shape != mean.shape or z.ndim != 1 or z.shape[0] != cov.dim:
        raise DimensionMismatch(
            f"z {z.shape}, mean {mean.shape}, cov dim {cov.dim} do not agree"
        )
    w = cov.solve_lower(z - mean)
    return float(-0.5 * cov.dim * LOG_2PI - cov.log_det_sqrt - 0.5 * np.dot(w, w))


def gaussian_log_pdf_batch(Z: np.ndarray, mean: np.ndarray, cov: CholeskyFactor) -> np.ndarray:
    """gaussian_log_pdf for each row of an (n, d) matrix, vectorized."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != cov.dim:
        raise DimensionMismatch(f"batch shape {Z.shape} vs cov dim {cov.dim}")
    W = cov.solve_lower((Z - mean).T)
    quad = np.sum(W * W, axis=0)
    return -0.5 * cov.dim * LOG_2PI - cov.log_det_sqrt - 0.5 * quad
