"""Parity between the compiled quaternion kernels and the numpy fallback."""

import numpy as np
import pytest

from motionforecast._kernels import _quatcore_py as py_kernels
from motionforecast import rotmath as rm

try:
    from motionforecast._kernels import _quatcore as c_kernels
except ImportError:  # pragma: no cover - source-only install
    c_kernels = None

needs_compiled = pytest.mark.skipif(c_kernels is None, reason="compiled kernels not built")


@pytest.fixture
def quats(rng):
    return rm.random_quat(rng, (64, 3))


@needs_compiled
def test_mul_parity(quats):
    other = np.roll(quats, 7, axis=0)
    assert np.max(np.abs(c_kernels.mul(quats, other) - py_kernels.mul(quats, other))) < 1e-14


@needs_compiled
def test_conj_parity(quats):
    assert np.array_equal(c_kernels.conj(quats), py_kernels.conj(quats))


@needs_compiled
def test_normalize_canonical_parity(rng):
    raw = rng.standard_normal((100, 4)) * 3.0
    raw[0] = [0.0, -1.0, 0.2, 0.3]  # w = 0 boundary
    a = c_kernels.normalize_canonical(raw)
    b = py_kernels.normalize_canonical(raw)
    assert np.max(np.abs(a - b)) < 1e-14
    assert np.all(a[:, 0] >= 0)


@needs_compiled
def test_exp_log_parity(rng):
    eps = rng.standard_normal((80, 3))
    eps[0] = 0.0  # small-angle branch
    eps[1] = [1e-12, 0, 0]
    assert np.max(np.abs(c_kernels.exp(eps) - py_kernels.exp(eps))) < 1e-14
    q = py_kernels.exp(eps)
    assert np.max(np.abs(c_kernels.log(q) - py_kernels.log(q))) < 1e-13


@needs_compiled
def test_to_rotmat_parity(quats):
    assert np.max(np.abs(c_kernels.to_rotmat(quats) - py_kernels.to_rotmat(quats))) < 1e-14


@needs_compiled
def test_integrate_parity(rng):
    q0 = rm.random_quat(rng, 4)
    diffs = rm.exp_so3(0.1 * rng.standard_normal((10, 4, 3)))
    assert np.max(np.abs(c_kernels.integrate(q0, diffs) - py_kernels.integrate(q0, diffs))) < 1e-13
