"""Shared dense Gaussian linear algebra.

Every multivariate-normal computation in the package (log-densities,
simulation, kriging, conditional updates) goes through `CholeskyFactor` so
there is a single numerical policy: attempt a plain Cholesky factorization,
retry once with a small diagonal jitter, and fail loudly afterwards.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from gevfield.exceptions import FactorizationError

LOG_2PI = float(np.log(2.0 * np.pi))


class CholeskyFactor:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix."""

    def __init__(self, matrix: np.ndarray, jitter: float | None = None):
        """Factor ``matrix``; on failure retry once with ``jitter`` added to the diagonal.

        Args:
            matrix: symmetric (D, D) array.
            jitter: diagonal ridge for the retry. Defaults to
                ``1e-10 * mean(abs(diag))``.

        Raises:
            FactorizationError: if the jittered retry also fails.
        """
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
        self.dim = matrix.shape[0]
        try:
            self.lower = scipy.linalg.cholesky(matrix, lower=True)
        except scipy.linalg.LinAlgError:
            if jitter is None:
                jitter = 1e-10 * float(np.mean(np.abs(np.diag(matrix))))
            bumped = matrix + jitter * np.eye(self.dim)
            try:
                self.lower = scipy.linalg.cholesky(bumped, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise FactorizationError(
                    f"matrix of dim {self.dim} not positive definite "
                    f"(retry jitter {jitter:.3e})"
                ) from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x = rhs`` using the stored factor."""
        return scipy.linalg.cho_solve((self.lower, True), rhs)

    def half_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``L x = rhs`` (useful for whitening residuals)."""
        return scipy.linalg.solve_triangular(self.lower, rhs, lower=True)

    def log_det(self) -> float:
        """Log-determinant of the factored matrix."""
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def inverse(self) -> np.ndarray:
        """Dense inverse (precision matrix). O(D^3); cache the result."""
        return self.solve(np.eye(self.dim))

    def quad_form(self, vec: np.ndarray) -> float:
        """Quadratic form ``vec' A^{-1} vec``."""
        half = self.half_solve(vec)
        return float(half @ half)


def mvn_log_density(x: np.ndarray, mean: np.ndarray, factor: CholeskyFactor) -> float:
    """Multivariate normal log-density at ``x`` given a pre-factored covariance."""
    dev = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    return -0.5 * (factor.dim * LOG_2PI + factor.log_det() + factor.quad_form(dev))


def mvn_sample(mean: np.ndarray, factor: CholeskyFactor, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mean, A) using the stored factor of A."""
    z = rng.standard_normal(factor.dim)
    return np.asarray(mean, dtype=float) + factor.lower @ z
