"""Quaternion and SO(3) algebra.

Conventions used throughout the package:

- Quaternions are float64 numpy arrays with (w, x, y, z) on the last axis,
  Hamilton product, unit norm, and canonical hemisphere w >= 0 (for w == 0
  the first nonzero of x, y, z is positive). Every constructing operation
  renormalizes and canonicalizes.
- Tangent vectors are 3-vectors in radians (axis * angle); the log map
  returns the principal branch with norm <= pi.
- A differential quaternion qd relates consecutive poses by right
  multiplication: q_t = q_{t-1} * qd_t (body frame).

All functions are pure and accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

from motionforecast._kernels import quatcore

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def quat(w, x, y, z):
    """Build a single unit, hemisphere-canonical quaternion."""
    q = np.array([w, x, y, z], dtype=np.float64)
    _check_finite(q)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    return quatcore.normalize_canonical(q)


def normalize(q):
    """Renormalize and canonicalize quaternion array(s)."""
    q = np.asarray(q, dtype=np.float64)
    _check_finite(q)
    return quatcore.normalize_canonical(q)


def quat_mul(a, b):
    """Hamilton product, renormalized and hemisphere-canonical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_finite(a, b)
    return quatcore.normalize_canonical(quatcore.mul(a, b))


def quat_conj(q):
    """Conjugate; equals the inverse for unit quaternions."""
    return quatcore.conj(np.asarray(q, dtype=np.float64))


quat_inv = quat_conj


def exp_so3(eps):
    """Exponential map from tangent 3-vectors to unit quaternions."""
    eps = np.asarray(eps, dtype=np.float64)
    _check_finite(eps)
    return quatcore.exp(eps)


def log_so3(q):
    """Principal-branch log map; result norm <= pi."""
    q = np.asarray(q, dtype=np.float64)
    _check_finite(q)
    return quatcore.log(q)


def quat_to_rotmat(q):
    """Unit quaternion(s) to rotation matrix(es), shape (..., 3, 3)."""
    return quatcore.to_rotmat(np.asarray(q, dtype=np.float64))


def hat(eps):
    """3-vector(s) to skew-symmetric matrix(es): hat(e) @ v == cross(e, v)."""
    eps = np.asarray(eps, dtype=np.float64)
    out = np.zeros(eps.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -eps[..., 2]
    out[..., 0, 2] = eps[..., 1]
    out[..., 1, 0] = eps[..., 2]
    out[..., 1, 2] = -eps[..., 0]
    out[..., 2, 0] = -eps[..., 1]
    out[..., 2, 1] = eps[..., 0]
    return out


def vee(m):
    """Inverse of hat; rejects matrices that are not skew within 1e-9."""
    m = np.asarray(m, dtype=np.float64)
    if np.max(np.abs(m + np.swapaxes(m, -1, -2))) >= 1e-9:
        raise ValueError("matrix is not skew-symmetric")
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def diff_quat(q_prev, q_curr):
    """Differential rotation qd with q_prev * qd == q_curr."""
    return quat_mul(quat_conj(q_prev), q_curr)


def integrate_diffs(q0, diffs):
    """Cumulatively apply differential quaternions to a start pose.

    q0 has shape (..., 4) and diffs (T, ..., 4); returns (T, ..., 4).
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    q0 = np.asarray(q0, dtype=np.float64)
    if diffs.shape[0] == 0:
        return np.empty((0,) + q0.shape, dtype=np.float64)
    lead = q0.shape[:-1]
    out = quatcore.integrate(q0.reshape(-1, 4), diffs.reshape(diffs.shape[0], -1, 4))
    return out.reshape((diffs.shape[0],) + lead + (4,))


def weighted_quat_mean(qs, weights):
    """Eigenvector-based weighted quaternion average.

    Stacks weight-scaled quaternions (hemisphere-aligned to the first
    entry) into Q and returns the principal eigenvector of Q Q^T. Note the
    columns are scaled by the weights themselves, so a weight enters the
    eigenproblem quadratically.
    """
    qs = np.asarray(qs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != 4:
        raise ValueError(f"expected (K, 4) quaternions, got {qs.shape}")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise ValueError("weights must be nonnegative with at least one positive")
    dots = qs @ qs[0]
    aligned = qs * np.where(dots < 0, -1.0, 1.0)[:, None]
    scaled = aligned * weights[:, None]
    m = scaled.T @ scaled
    _, vecs = np.linalg.eigh(m)
    return quatcore.normalize_canonical(vecs[:, -1])


def quat_to_euler_zyx(q):
    """Intrinsic Z-Y-X Euler angles (yaw, pitch, roll) in radians.

    At gimbal lock (|pitch| = pi/2) roll is set to 0 by convention so the
    decomposition is deterministic.
    """
    r = quat_to_rotmat(q)
    sp = np.clip(-r[..., 2, 0], -1.0, 1.0)
    pitch = np.arcsin(sp)
    locked = np.abs(sp) > 1.0 - 1e-12
    yaw = np.where(
        locked,
        np.arctan2(-r[..., 0, 1], r[..., 1, 1]),
        np.arctan2(r[..., 1, 0], r[..., 0, 0]),
    )
    roll = np.where(locked, 0.0, np.arctan2(r[..., 2, 1], r[..., 2, 2]))
    return np.stack([yaw, pitch, roll], axis=-1)


def euler_zyx_to_quat(angles):
    """Inverse of quat_to_euler_zyx: (yaw, pitch, roll) -> quaternion."""
    angles = np.asarray(angles, dtype=np.float64)
    yaw, pitch, roll = angles[..., 0], angles[..., 1], angles[..., 2]
    zero = np.zeros_like(yaw)
    qz = exp_so3(np.stack([zero, zero, yaw], axis=-1))
    qy = exp_so3(np.stack([zero, pitch, zero], axis=-1))
    qx = exp_so3(np.stack([roll, zero, zero], axis=-1))
    return quat_mul(quat_mul(qz, qy), qx)


def random_quat(rng, size=None):
    """Haar-uniform random unit quaternion(s)."""
    shape = (4,) if size is None else (tuple(np.atleast_1d(size)) + (4,))
    g = rng.standard_normal(shape)
    return quatcore.normalize_canonical(g)
