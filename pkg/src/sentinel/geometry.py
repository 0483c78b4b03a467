"""Multivariate Gaussian estimation and closed-form divergences.

Everything downstream (window scoring, safe-model fitting, the SDE oracles)
goes through :class:`GaussianModel`, which validates SPD-ness once at
construction and caches the Cholesky factor so that every solve afterwards is
a triangular solve rather than an explicit inverse.

All divergences are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_RIDGE = 1e-6
NEGATIVE_KL_TOLERANCE = 1e-9
_SYMMETRY_RTOL = 1e-12


class GeometryError(ValueError):
    """Base class for numerical failures in this module."""


class InsufficientDataError(GeometryError):
    pass


class NotSPDError(GeometryError):
    """Covariance could not be factorized; the window is degenerate."""


class DimensionMismatchError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """A d-dimensional Gaussian with a cached lower Cholesky factor.

    Build instances with :meth:`from_moments` or :func:`fit_gaussian`; the
    raw constructor trusts its arguments.
    """

    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray
    log_det: float

    @classmethod
    def from_moments(cls, mean, covariance) -> GaussianModel:
        mean = np.array(mean, dtype=float).reshape(-1)
        cov = np.array(covariance, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionMismatchError(
                f"covariance shape {cov.shape} does not match mean length {d}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NotSPDError("non-finite entries in mean or covariance")
        scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > _SYMMETRY_RTOL * scale:
            raise NotSPDError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NotSPDError(f"covariance is not positive definite: {exc}") from None
        diag = np.diag(chol)
        if not np.all(diag > 0):
            raise NotSPDError("Cholesky factor has a nonpositive diagonal")
        log_det = 2.0 * float(np.sum(np.log(diag)))
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        return cls(mean=mean, covariance=cov, chol=chol, log_det=log_det)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """Return L^{-1} v, where L is the Cholesky factor. Accepts vectors or matrices."""
        return solve_triangular(self.chol, v, lower=True, check_finite=False)

    def mahalanobis_sq(self, v: np.ndarray) -> float:
        z = self.whiten(np.asarray(v, dtype=float))
        return float(np.dot(z, z))

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Log density at the rows of ``x`` (shape (n, d) or (d,))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = self.whiten((x - self.mean).T)
        quad = np.einsum("ij,ij->j", z, z)
        return -0.5 * (self.dim * math.log(2 * math.pi) + self.log_det + quad)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> GaussianModel:
        return cls.from_moments(data["mean"], data["covariance"])


@dataclass(frozen=True, order=True)
class KlValue:
    """A KL divergence in nats, guaranteed nonnegative."""

    nats: float

    def __post_init__(self):
        if math.isnan(self.nats) or self.nats < 0:
            raise GeometryError(f"KL divergence must be nonnegative, got {self.nats}")

    @classmethod
    def from_raw(cls, value: float) -> KlValue:
        """Clamp round-off negatives to zero; reject anything more negative than 1e-9."""
        value = float(value)
        if value < -NEGATIVE_KL_TOLERANCE or math.isnan(value):
            raise GeometryError(f"negative KL divergence {value!r}: numerical failure")
        return cls(max(value, 0.0))

    def __float__(self) -> float:
        return self.nats


def fit_gaussian(samples, ridge: float = DEFAULT_RIDGE) -> GaussianModel:
    """Fit mean and unbiased covariance (plus ``ridge * I``) to the rows of ``samples``.

    Raises:
        InsufficientDataError: fewer than two samples.
        NotSPDError: the regularized covariance is still not positive definite.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatchError(f"samples must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    if ridge:
        cov[np.diag_indices(d)] += ridge
    return GaussianModel.from_moments(mean, cov)


def _raw_kl(p: GaussianModel, q: GaussianModel) -> float:
    if p.dim != q.dim:
        raise DimensionMismatchError(f"dimension mismatch: {p.dim} vs {q.dim}")
    # tr(Σq⁻¹ Σp) = ‖Lq⁻¹ Lp‖_F²
    m = q.whiten(p.chol)
    trace_term = float(np.sum(m * m))
    maha = q.mahalanobis_sq(p.mean - q.mean)
    return 0.5 * (trace_term + maha - p.dim + q.log_det - p.log_det)


def kl_gaussian(p: GaussianModel, q: GaussianModel) -> KlValue:
    """KL(p ‖ q) for two Gaussians of equal dimension, in nats."""
    return KlValue.from_raw(_raw_kl(p, q))


def fim_surrogate(g: GaussianModel) -> float:
    """Fisher-information proxy ``1 / det(Σ)``; small for dispersed windows."""
    return math.exp(-g.log_det)


def fisher_quadratic_approx(
    base: GaussianModel, mean_shift, cov_shift=None
) -> tuple[KlValue, float]:
    """Compare exact KL with its second-order Fisher expansion.

    The shifted model has mean ``base.mean + mean_shift`` and covariance
    ``base.covariance + cov_shift``. Returns ``(kl(shifted, base), quadratic)``
    where ``quadratic = ½ dμᵀ Σ⁻¹ dμ + ¼ tr(Σ⁻¹ dΣ Σ⁻¹ dΣ)``, i.e. half the
    Fisher quadratic form of the Gaussian family at ``base``. For a pure mean
    shift the two agree exactly.
    """
    shift = np.asarray(mean_shift, dtype=float).reshape(-1)
    if shift.shape[0] != base.dim:
        raise DimensionMismatchError(
            f"mean_shift has length {shift.shape[0]}, expected {base.dim}"
        )
    quadratic = 0.5 * base.mahalanobis_sq(shift)
    cov = base.covariance
    if cov_shift is not None:
        dcov = np.asarray(cov_shift, dtype=float)
        if dcov.shape != (base.dim, base.dim):
            raise DimensionMismatchError(f"cov_shift shape {dcov.shape} is not {(base.dim,) * 2}")
        # Σ⁻¹ dΣ via two triangular solves; the trace of its square is symmetric-safe.
        a = base.whiten(base.whiten(dcov).T).T
        quadratic += 0.25 * float(np.sum(a * a.T))
        cov = cov + dcov
    shifted = GaussianModel.from_moments(base.mean + shift, cov)
    return kl_gaussian(shifted, base), quadratic


def landauer_bound(delta_kl: float, temperature: float) -> float:
    """Lower bound ``T * max(ΔD_KL, 0)`` on the work behind a divergence increase.

    Units are k_B-normalized: energy per k_B, divergence in nats.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature * max(float(delta_kl), 0.0)
