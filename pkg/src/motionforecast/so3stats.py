"""Concentrated Gaussian distributions on SO(3) and their mixtures.

A distribution is parameterized by a mean rotation and a 3x3 SPD
covariance over the tangent space at the mean: R = exp(hat(eps)) * Rbar
with eps ~ N(0, Sigma). The density is taken with respect to Lebesgue
measure in the tangent chart, normalized by (2 pi)^{3/2} |Sigma|^{1/2};
exact in the concentrated regime this package targets.

Point masses (Sigma identically zero) are supported as the base case of
temporal integration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from motionforecast import rotmath
from motionforecast.errors import NumericalError

_LOG_2PI = np.log(2.0 * np.pi)
_MAX_CONDITION = 1e12


def _symmetrize(cov):
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class ConcentratedGaussianSO3:
    """Single-mode rotation distribution (mean quaternion, tangent covariance)."""

    mean: np.ndarray  # (4,) unit quaternion
    cov: np.ndarray  # (3, 3) SPD, radians^2; exactly zero for a point mass

    def __post_init__(self):
        mean = rotmath.normalize(np.asarray(self.mean, dtype=np.float64))
        cov = _symmetrize(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValueError("non-finite covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def is_point_mass(self):
        return not np.any(self.cov)

    def _chol(self):
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc


def point_mass(mean):
    return ConcentratedGaussianSO3(mean=np.asarray(mean), cov=np.zeros((3, 3)))


def tangent_at_mean(d, quats):
    """Tangent coordinates of rotation(s) relative to the distribution mean."""
    return rotmath.log_so3(rotmath.quat_mul(quats, rotmath.quat_conj(d.mean)))


def log_pdf(d, quats):
    """Log density at quaternion(s); batched over leading dimensions."""
    quats = np.asarray(quats, dtype=np.float64)
    eps = tangent_at_mean(d, quats)
    if d.is_point_mass:
        at_mean = np.linalg.norm(eps, axis=-1) < 1e-12
        if not np.all(at_mean):
            raise NumericalError("point-mass density evaluated away from its mean")
        return np.full(eps.shape[:-1], np.inf) if eps.ndim > 1 else np.inf
    sign, logdet = np.linalg.slogdet(d.cov)
    if sign <= 0 or np.linalg.cond(d.cov) > _MAX_CONDITION:
        raise NumericalError("singular or indefinite covariance")
    sol = np.linalg.solve(d.cov, eps[..., None])[..., 0]
    quad = np.einsum("...i,...i->...", eps, sol)
    return -0.5 * quad - 0.5 * (3.0 * _LOG_2PI + logdet)


def sample(d, rng, size=None):
    """Draw quaternion(s): exp(L u) * mean with L the Cholesky factor of cov."""
    if d.is_point_mass:
        if size is None:
            return d.mean.copy()
        return np.broadcast_to(d.mean, (size, 4)).copy()
    chol = d._chol()
    n = 1 if size is None else size
    u = rng.standard_normal((n, 3))
    q = rotmath.quat_mul(rotmath.exp_so3(u @ chol.T), d.mean)
    return q[0] if size is None else q


def compose(d1, d2):
    """Distribution of R1 * R2 under first-order BCH.

    Mean is the quaternion product; covariance is Sigma1 + R1 Sigma2 R1^T
    with R1 the rotation matrix of the first mean.
    """
    mean = rotmath.quat_mul(d1.mean, d2.mean)
    r1 = rotmath.quat_to_rotmat(d1.mean)
    cov = _symmetrize(d1.cov + r1 @ d2.cov @ r1.T)
    return ConcentratedGaussianSO3(mean=mean, cov=cov)


def integrate_distribution(per_step, q0):
    """Fold per-step differential distributions into absolute-pose distributions.

    D_0 is the point mass at q0; D_t = compose(D_{t-1}, per_step[t]).
    """
    out = []
    current = point_mass(q0)
    for step in per_step:
        current = compose(current, step)
        out.append(current)
    return out


@dataclass(frozen=True)
class MixtureSO3:
    """Weighted mixture of Concentrated Gaussians on SO(3)."""

    weights: np.ndarray  # (K,) on the simplex
    components: list = field(default_factory=list)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) == 0:
            raise ValueError("mixture needs at least one component")
        if w.shape != (len(self.components),):
            raise ValueError("one weight per component required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a simplex vector")
        object.__setattr__(self, "weights", w)


def mixture_log_pdf(m, quats):
    """Stable log-sum-exp mixture density; zero-weight components are skipped."""
    terms = []
    for w, comp in zip(m.weights, m.components):
        if w == 0.0:
            continue
        terms.append(np.log(w) + log_pdf(comp, quats))
    stacked = np.stack(terms, axis=0)
    peak = np.max(stacked, axis=0)
    return peak + np.log(np.sum(np.exp(stacked - peak), axis=0))


def mixture_sample(m, rng, size=None):
    """Ancestral sampling: component index by weight, then component draw."""
    n = 1 if size is None else size
    idx = rng.choice(len(m.components), size=n, p=m.weights)
    out = np.empty((n, 4))
    for i, k in enumerate(idx):
        out[i] = sample(m.components[k], rng)
    return out[0] if size is None else out
