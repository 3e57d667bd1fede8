"""Pure-numpy quaternion kernels.

Fallback implementation of the batched hot loops; the compiled Cython
module `_quatcore` exposes the same functions. All inputs are float64
arrays with quaternions in (w, x, y, z) order on the last axis.
"""

import numpy as np

IMPL = "python"

_SMALL_ANGLE = 1e-8


def mul(a, b):
    """Hamilton product of two (M, 4) quaternion arrays (no renormalization)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast(a, b).shape[:-1] + (4,), dtype=np.float64)
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def conj(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def normalize_canonical(q):
    """Normalize to unit length and canonicalize to the w >= 0 hemisphere.

    For w == 0 the first nonzero of (x, y, z) is made positive.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = q / norm
    flat = out.reshape(-1, 4)
    w = flat[:, 0]
    sign = np.where(w > 0.0, 1.0, np.where(w < 0.0, -1.0, 0.0))
    undecided = sign == 0.0
    if np.any(undecided):
        for k in (1, 2, 3):
            col = flat[:, k]
            sign = np.where(undecided & (col > 0.0), 1.0, sign)
            sign = np.where(undecided & (col < 0.0), -1.0, sign)
            undecided = sign == 0.0
        sign = np.where(undecided, 1.0, sign)
    flat *= sign[:, None]
    return flat.reshape(q.shape)


def exp(eps):
    """Exponential map: (M, 3) tangent vectors -> (M, 4) unit quaternions."""
    eps = np.asarray(eps, dtype=np.float64)
    theta = np.linalg.norm(eps, axis=-1)
    half = 0.5 * theta
    out = np.empty(eps.shape[:-1] + (4,), dtype=np.float64)
    out[..., 0] = np.cos(half)
    small = theta < _SMALL_ANGLE
    # sin(t/2)/t -> 1/2 - t^2/48 as t -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    out[..., 1:] = eps * factor[..., None]
    return normalize_canonical(out)


def log(q):
    """Log map: (M, 4) unit quaternions -> (M, 3) principal axis-angle vectors."""
    q = np.asarray(q, dtype=np.float64)
    w = np.abs(q[..., 0])
    v = q[..., 1:] * np.sign(q[..., 0])[..., None]
    # sign(0) == 0 would zero the vector part; restore it for w == 0
    zero_w = q[..., 0] == 0.0
    if np.any(zero_w):
        v = np.where(zero_w[..., None], q[..., 1:], v)
    s = np.linalg.norm(v, axis=-1)
    w = np.minimum(w, 1.0)
    angle = 2.0 * np.arctan2(s, w)
    small = s < _SMALL_ANGLE
    # angle/s -> 2/w - ... as s -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(small, 2.0 / np.maximum(w, _SMALL_ANGLE), angle / np.where(small, 1.0, s))
    return v * factor[..., None]


def to_rotmat(q):
    """(M, 4) unit quaternions -> (M, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def integrate(q0, diffs):
    """Cumulative products q_t = q_{t-1} * d_t over the leading time axis.

    q0: (N, 4); diffs: (T, N, 4). Returns (T, N, 4), normalized/canonical.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    T = diffs.shape[0]
    out = np.empty_like(diffs)
    cur = q0
    for t in range(T):
        cur = normalize_canonical(mul(cur, diffs[t]))
        out[t] = cur
    return out
