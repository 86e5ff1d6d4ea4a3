"""Sigma points and the unscented transform (classic single-parameter form)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "DecompositionError",
    "SigmaSet",
    "default_kappa",
    "sigma_points",
    "symmetrize",
    "unscented_moments",
    "ut_cross_cov",
    "ut_propagate",
]

JITTER_RETRIES = 3


class DecompositionError(np.linalg.LinAlgError):
    """Raised when a covariance cannot be factored even after jitter."""


def symmetrize(C: np.ndarray) -> np.ndarray:
    return 0.5 * (C + C.T)


def default_kappa(n: int) -> float:
    # 3 - n, keeping n + kappa >= 0.5
    return max(3.0 - n, 0.5 - n)


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray  # (2n+1, n)
    w_mean: np.ndarray  # (2n+1,)
    w_cov: np.ndarray  # (2n+1,)
    kappa: float

    @property
    def mean(self) -> np.ndarray:
        return self.points[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)


def _chol(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with escalating diagonal jitter."""
    n = C.shape[0]
    if n == 1:
        c = C[0, 0]
        if c >= 0.0:
            return np.sqrt(C)
    else:
        try:
            return np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            pass
    if not np.any(C):
        return np.zeros_like(C)
    tr = np.trace(C)
    if not tr > 0.0:
        # a nonzero PSD matrix has positive trace
        raise DecompositionError("covariance is not positive semi-definite")
    jitter = 1e-12 * tr / n
    for _ in range(JITTER_RETRIES):
        try:
            L = np.linalg.cholesky(C + jitter * np.eye(n))
            if np.all(np.isfinite(L)):
                return L
        except np.linalg.LinAlgError:
            pass
        jitter *= 10.0
    raise DecompositionError("covariance is not positive semi-definite")


def sigma_points(mean, cov, kappa: float | None = None) -> SigmaSet:
    """Generate the ``2n+1`` sigma points of ``N(mean, cov)``.

    Points are ``mean`` and ``mean +/- L[:, i]`` where ``L`` is the lower
    Cholesky factor of ``(n + kappa) * cov``. Weights are
    ``kappa / (n + kappa)`` for the centre point and ``1 / (2 (n + kappa))``
    for the others, shared by the mean and the covariance.

    Parameters
    ----------
    mean : array_like, shape (n,)
    cov : array_like, shape (n, n)
        Symmetric positive semi-definite. An all-zero matrix is accepted and
        collapses every point onto ``mean``.
    kappa : float, optional
        Spread parameter; defaults to ``default_kappa(n)``.

    Raises
    ------
    DecompositionError
        If ``cov`` cannot be factored after jitter escalation.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = mean.shape[0]
    if cov.shape != (n, n):
        raise ValueError(f"cov has shape {cov.shape}, expected {(n, n)}")
    if kappa is None:
        kappa = default_kappa(n)
    w = _weights(n, float(kappa))

    if n == 1 and cov[0, 0] >= 0.0:
        d = np.sqrt((1 + kappa) * cov[0, 0])
        m = mean[0]
        points = np.array([[m], [m + d], [m - d]])
    else:
        L = _chol((n + kappa) * cov)
        points = np.empty((2 * n + 1, n))
        points[0] = mean
        points[1 : n + 1] = mean + L.T
        points[n + 1 :] = mean - L.T
    return SigmaSet(points=points, w_mean=w, w_cov=w, kappa=float(kappa))


@lru_cache(maxsize=64)
def _weights(n: int, kappa: float) -> np.ndarray:
    lam = n + kappa
    if lam <= 0:
        raise ValueError(f"n + kappa must be positive, got {lam}")
    w = np.full(2 * n + 1, 0.5 / lam)
    w[0] = kappa / lam
    w.flags.writeable = False
    return w


def _apply(f, points: np.ndarray, vectorized: bool) -> np.ndarray:
    if vectorized:
        Y = np.asarray(f(points), dtype=float)
        return Y.reshape(len(points), -1)
    return np.array([np.atleast_1d(f(p)) for p in points], dtype=float)


def unscented_moments(Y: np.ndarray, w_mean: np.ndarray, w_cov: np.ndarray, additive_cov=None):
    """Weighted mean and covariance of transformed points ``Y`` (rows)."""
    mean = w_mean @ Y
    D = Y - mean
    cov = (D.T * w_cov) @ D
    if additive_cov is not None:
        if np.shape(additive_cov) != cov.shape:
            additive_cov = np.atleast_2d(additive_cov)
            if additive_cov.shape != cov.shape:
                raise ValueError(
                    f"additive_cov has shape {additive_cov.shape}, expected {cov.shape}"
                )
        cov = cov + additive_cov
    return mean, (cov if cov.shape[0] == 1 else symmetrize(cov))


def ut_propagate(s: SigmaSet, f, additive_cov=None, vectorized: bool = True):
    """Push a sigma set through ``f`` and return ``(mean, cov)``.

    ``f`` is applied to the whole ``(2n+1, n)`` point array at once unless
    ``vectorized`` is false. ``additive_cov`` (e.g. process noise) is added to
    the propagated covariance.
    """
    Y = _apply(f, s.points, vectorized)
    return unscented_moments(Y, s.w_mean, s.w_cov, additive_cov)


def ut_cross_cov(s: SigmaSet, f_outputs, y_mean) -> np.ndarray:
    """Cross-covariance between the sigma points and their images."""
    Y = np.asarray(f_outputs, dtype=float)
    if Y.ndim == 0 or len(Y) != len(s.points):
        raise ValueError("f_outputs must be aligned with the sigma points")
    Y = Y.reshape(len(s.points), -1)
    dX = s.points - s.w_mean @ s.points
    dY = Y - np.asarray(y_mean, dtype=float)
    return (dX.T * s.w_cov) @ dY
