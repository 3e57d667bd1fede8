# cython: language_level=3
"""Compiled quaternion kernels.

Same surface as `_quatcore_py`; selected at import time when available.
Quaternions are float64 (w, x, y, z) rows.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport atan2, cos, fabs, sin, sqrt

cnp.import_array()

IMPL = "cython"

cdef double _SMALL_ANGLE = 1e-8


cdef inline void _mul1(const double* a, const double* b, double* o) nogil:
    o[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    o[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    o[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    o[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]


cdef inline void _normcanon1(double* q) nogil:
    cdef double n = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    cdef double s = 1.0
    cdef int k
    q[0] /= n; q[1] /= n; q[2] /= n; q[3] /= n
    if q[0] < 0.0:
        s = -1.0
    elif q[0] == 0.0:
        for k in range(1, 4):
            if q[k] > 0.0:
                s = 1.0
                break
            elif q[k] < 0.0:
                s = -1.0
                break
    if s < 0.0:
        q[0] = -q[0]; q[1] = -q[1]; q[2] = -q[2]; q[3] = -q[3]


def mul(a, b):
    a2, b2 = np.broadcast_arrays(np.ascontiguousarray(a, dtype=np.float64),
                                 np.ascontiguousarray(b, dtype=np.float64))
    cdef cnp.ndarray[double, ndim=2] af = np.ascontiguousarray(a2).reshape(-1, 4)
    cdef cnp.ndarray[double, ndim=2] bf = np.ascontiguousarray(b2).reshape(-1, 4)
    cdef Py_ssize_t m = af.shape[0], i
    cdef cnp.ndarray[double, ndim=2] out = np.empty((m, 4), dtype=np.float64)
    for i in range(m):
        _mul1(&af[i, 0], &bf[i, 0], &out[i, 0])
    return out.reshape(a2.shape)


def conj(q):
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def normalize_canonical(q):
    q = np.asarray(q, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] flat = np.array(q, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t m = flat.shape[0], i
    for i in range(m):
        _normcanon1(&flat[i, 0])
    return flat.reshape(q.shape)


def exp(eps):
    eps = np.asarray(eps, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ef = np.ascontiguousarray(eps).reshape(-1, 3)
    cdef Py_ssize_t m = ef.shape[0], i
    cdef cnp.ndarray[double, ndim=2] out = np.empty((m, 4), dtype=np.float64)
    cdef double t, factor
    for i in range(m):
        t = sqrt(ef[i, 0] * ef[i, 0] + ef[i, 1] * ef[i, 1] + ef[i, 2] * ef[i, 2])
        out[i, 0] = cos(0.5 * t)
        if t < _SMALL_ANGLE:
            factor = 0.5 - t * t / 48.0
        else:
            factor = sin(0.5 * t) / t
        out[i, 1] = ef[i, 0] * factor
        out[i, 2] = ef[i, 1] * factor
        out[i, 3] = ef[i, 2] * factor
        _normcanon1(&out[i, 0])
    return out.reshape(eps.shape[:-1] + (4,))


def log(q):
    q = np.asarray(q, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] qf = np.ascontiguousarray(q).reshape(-1, 4)
    cdef Py_ssize_t m = qf.shape[0], i
    cdef cnp.ndarray[double, ndim=2] out = np.empty((m, 3), dtype=np.float64)
    cdef double w, vx, vy, vz, s, angle, factor, sgn
    for i in range(m):
        sgn = 1.0 if qf[i, 0] >= 0.0 else -1.0
        w = fabs(qf[i, 0])
        vx = sgn * qf[i, 1]; vy = sgn * qf[i, 2]; vz = sgn * qf[i, 3]
        s = sqrt(vx * vx + vy * vy + vz * vz)
        if w > 1.0:
            w = 1.0
        angle = 2.0 * atan2(s, w)
        if s < _SMALL_ANGLE:
            factor = 2.0 / (w if w > _SMALL_ANGLE else _SMALL_ANGLE)
        else:
            factor = angle / s
        out[i, 0] = vx * factor
        out[i, 1] = vy * factor
        out[i, 2] = vz * factor
    return out.reshape(q.shape[:-1] + (3,))


def to_rotmat(q):
    q = np.asarray(q, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] qf = np.ascontiguousarray(q).reshape(-1, 4)
    cdef Py_ssize_t m = qf.shape[0], i
    cdef cnp.ndarray[double, ndim=3] out = np.empty((m, 3, 3), dtype=np.float64)
    cdef double w, x, y, z
    for i in range(m):
        w = qf[i, 0]; x = qf[i, 1]; y = qf[i, 2]; z = qf[i, 3]
        out[i, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
        out[i, 0, 1] = 2.0 * (x * y - w * z)
        out[i, 0, 2] = 2.0 * (x * z + w * y)
        out[i, 1, 0] = 2.0 * (x * y + w * z)
        out[i, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
        out[i, 1, 2] = 2.0 * (y * z - w * x)
        out[i, 2, 0] = 2.0 * (x * z - w * y)
        out[i, 2, 1] = 2.0 * (y * z + w * x)
        out[i, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out.reshape(q.shape[:-1] + (3, 3))


def integrate(q0, diffs):
    cdef cnp.ndarray[double, ndim=2] q0f = np.ascontiguousarray(q0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] df = np.ascontiguousarray(diffs, dtype=np.float64)
    cdef Py_ssize_t T = df.shape[0], n = df.shape[1], t, j
    cdef cnp.ndarray[double, ndim=3] out = np.empty((T, n, 4), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] cur = np.array(q0f, copy=True)
    for t in range(T):
        for j in range(n):
            _mul1(&cur[j, 0], &df[t, j, 0], &out[t, j, 0])
            _normcanon1(&out[t, j, 0])
            cur[j, 0] = out[t, j, 0]; cur[j, 1] = out[t, j, 1]
            cur[j, 2] = out[t, j, 2]; cur[j, 3] = out[t, j, 3]
    return out
