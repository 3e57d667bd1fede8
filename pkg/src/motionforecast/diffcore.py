"""Minimal reverse-mode automatic differentiation.

Dense float64 tensors with an implicit tape: each operation records its
parents and a backward closure; `backward` walks the graph once in
reverse topological order and accumulates gradients on every
requires_grad leaf. No graph optimization, no higher-order derivatives;
model sizes here are toy-scale so correctness and debuggability win.

Besides the generic operator set (matmul, elementwise, activations,
softmax/log-sum-exp, reductions, concat/slice) a few fused rotation ops
carry analytic gradients: Hamilton product, quaternion log map,
quaternion-to-rotation-matrix, and the zero-mean Gaussian log density
used by the loss.
"""

from __future__ import annotations

import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)
_SMALL = 1e-8


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return tensor_slice(self, key)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data):
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _track(*inputs):
    return any(isinstance(t, Tensor) and t.requires_grad for t in inputs)


def _make(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the parent shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from loss.

    The recorded graph is released afterwards so tensors can be reused as
    plain values.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            # free the graph; only leaves keep gradients past this call
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def matmul(a, b):
    """Matrix product with matching batch dimensions (no batch broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.data.shape[:-2] != b.data.shape[:-2]
            or a.data.shape[-1] != b.data.shape[-2]):
        raise ValueError(f"incompatible shapes: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        out_data = np.swapaxes(a.data, -1, -2)

        def bw(g):
            _accum(a, np.swapaxes(g, -1, -2))

    else:
        inv = np.argsort(axes)
        out_data = np.transpose(a.data, axes)

        def bw(g):
            _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tensors, bw)


def tensor_slice(a, key):
    a = as_tensor(a)
    out_data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(out_data, (a,), bw)


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(out_data, (a,), bw)


def tensor_mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def softplus(a):
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def bw(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bw)


def log_sum_exp(a, axis=-1):
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - peak)
    total = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(peak + np.log(total), axis=axis)

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * (e / total))

    return _make(out_data, (a,), bw)


def detach(a):
    """Cut gradient flow: same values, no recorded parents."""
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# rotation ops


def normalize_quat(a):
    """Normalize the last axis (length 4) to unit norm."""
    a = as_tensor(a)
    if a.data.shape[-1] != 4:
        raise ValueError(f"last axis must be 4, got {a.data.shape}")
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    out_data = a.data / norm

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, (g - out_data * dot) / norm)

    return _make(out_data, (a,), bw)


def _hamilton(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw_, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw_ - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw_ + ay * bz - az * by,
            aw * by - ax * bz + ay * bw_ + az * bx,
            aw * bz + ax * by - ay * bx + az * bw_,
        ],
        axis=-1,
    )


def _conj(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_product(a, b):
    """Hamilton product on the last axis (no normalization)."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = _hamilton(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(_hamilton(g, _conj(b.data)), a.data.shape))
        _accum(b, _unbroadcast(_hamilton(_conj(a.data), g), b.data.shape))

    return _make(out_data, (a, b), bw)


def quat_conj(a):
    a = as_tensor(a)
    out_data = _conj(a.data)

    def bw(g):
        _accum(a, _conj(g))

    return _make(out_data, (a,), bw)


def quat_log(a):
    """Principal-branch log map of (near-)unit quaternions, hemisphere safe.

    The input sign is canonicalized internally (constant w.r.t. the
    gradient), so q and -q give identical values and gradients.
    """
    a = as_tensor(a)
    q = a.data
    sign = np.where(q[..., 0] < 0.0, -1.0, 1.0)[..., None]
    qc = q * sign
    w = qc[..., 0]
    v = qc[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    denom = w * w + s * s
    angle = 2.0 * np.arctan2(s, w)
    small = s < _SMALL
    safe_s = np.where(small, 1.0, s)
    f = np.where(small, 2.0 / np.maximum(w, _SMALL), angle / safe_s)
    out_data = v * f[..., None]

    def bw(g):
        gv = (g * v).sum(axis=-1)
        # d f / d s divided by s, with series fallback near s = 0
        fp_over_s = np.where(
            small,
            -4.0 / (3.0 * np.maximum(w, _SMALL) ** 3),
            (2.0 * w * s / denom - angle) / (safe_s ** 3),
        )
        grad_w = -2.0 * gv / denom
        grad_v = g * f[..., None] + (fp_over_s * gv)[..., None] * v
        _accum(a, np.concatenate([grad_w[..., None], grad_v], axis=-1) * sign)

    return _make(out_data, (a,), bw)


def quat_to_rotmat(a):
    """(..., 4) unit quaternions to (..., 3, 3) rotation matrices."""
    a = as_tensor(a)
    q = a.data
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)

    def bw(g):
        gw = 2 * (
            -z * (g[..., 0, 1] - g[..., 1, 0])
            + y * (g[..., 0, 2] - g[..., 2, 0])
            - x * (g[..., 1, 2] - g[..., 2, 1])
        )
        gx = 2 * (
            y * (g[..., 0, 1] + g[..., 1, 0])
            + z * (g[..., 0, 2] + g[..., 2, 0])
            - 2 * x * (g[..., 1, 1] + g[..., 2, 2])
            - w * (g[..., 1, 2] - g[..., 2, 1])
        )
        gy = 2 * (
            x * (g[..., 0, 1] + g[..., 1, 0])
            + z * (g[..., 1, 2] + g[..., 2, 1])
            - 2 * y * (g[..., 0, 0] + g[..., 2, 2])
            + w * (g[..., 0, 2] - g[..., 2, 0])
        )
        gz = 2 * (
            x * (g[..., 0, 2] + g[..., 2, 0])
            + y * (g[..., 1, 2] + g[..., 2, 1])
            - 2 * z * (g[..., 0, 0] + g[..., 1, 1])
            - w * (g[..., 0, 1] - g[..., 1, 0])
        )
        _accum(a, np.stack([gw, gx, gy, gz], axis=-1))

    return _make(r, (a,), bw)


def build_lower_tri3(diag, off):
    """Assemble (..., 3, 3) lower-triangular factors from 3 diagonal and
    3 strictly-lower entries (order: L10, L20, L21)."""
    diag, off = as_tensor(diag), as_tensor(off)
    out_data = np.zeros(diag.data.shape[:-1] + (3, 3))
    out_data[..., 0, 0] = diag.data[..., 0]
    out_data[..., 1, 1] = diag.data[..., 1]
    out_data[..., 2, 2] = diag.data[..., 2]
    out_data[..., 1, 0] = off.data[..., 0]
    out_data[..., 2, 0] = off.data[..., 1]
    out_data[..., 2, 1] = off.data[..., 2]

    def bw(g):
        _accum(diag, np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 2, 2]], axis=-1))
        _accum(off, np.stack([g[..., 1, 0], g[..., 2, 0], g[..., 2, 1]], axis=-1))

    return _make(out_data, (diag, off), bw)


def mvn_log_pdf(eps, cov):
    """Log density of zero-mean 3-d Gaussians: batched (..., 3), (..., 3, 3).

    Gradient w.r.t. cov uses the full-matrix convention (each entry
    independent), consistent with cov being produced by L @ L^T.
    """
    eps, cov = as_tensor(eps), as_tensor(cov)
    inv = np.linalg.inv(cov.data)
    sol = (inv @ eps.data[..., None])[..., 0]
    quad = np.sum(eps.data * sol, axis=-1)
    _, logdet = np.linalg.slogdet(cov.data)
    out_data = -0.5 * (quad + logdet + 3.0 * _LOG_2PI)

    def bw(g):
        _accum(eps, _unbroadcast(-g[..., None] * sol, eps.data.shape))
        outer = sol[..., :, None] * sol[..., None, :]
        _accum(cov, _unbroadcast(0.5 * g[..., None, None] * (outer - inv), cov.data.shape))

    return _make(out_data, (eps, cov), bw)


def stack_rows(params, assignment):
    """Stack per-class parameter tensors into per-node rows.

    params: list of Tensors sharing a shape; assignment: node -> class
    index. Rows of equal class alias the same storage, so gradients
    accumulate across all nodes of that class.
    """
    params = [as_tensor(p) for p in params]
    assignment = np.asarray(assignment, dtype=int)
    out_data = np.stack([params[c].data for c in assignment], axis=0)

    def bw(g):
        for node, c in enumerate(assignment):
            _accum(params[c], g[node])

    return _make(out_data, tuple(params), bw)


def typed_apply(w_stack, x):
    """Per-node matrix product: out[..., n, :] = x[..., n, :] @ w_stack[n].

    w_stack: (N, D_in, D_out); x: (..., N, D_in).
    """
    w_stack, x = as_tensor(w_stack), as_tensor(x)
    n, d_in, d_out = w_stack.data.shape
    lead = x.data.shape[:-2]
    # one matrix product per node instead of one per (batch, node) row
    xt = x.data.reshape(-1, n, d_in).transpose(1, 0, 2)
    out_data = (xt @ w_stack.data).transpose(1, 0, 2).reshape(lead + (n, d_out))

    def bw(g):
        gt = g.reshape(-1, n, d_out).transpose(1, 0, 2)
        _accum(w_stack, xt.transpose(0, 2, 1) @ gt)
        gx = (gt @ w_stack.data.transpose(0, 2, 1)).transpose(1, 0, 2)
        _accum(x, gx.reshape(lead + (n, d_in)))

    return _make(out_data, (w_stack, x), bw)


def graph_mix(g_mat, x):
    """Graph-influence mixing: out[..., i, :] = sum_j G[i, j] x[..., j, :]."""
    g_mat, x = as_tensor(g_mat), as_tensor(x)
    out_data = g_mat.data @ x.data

    def bw(g):
        n = g_mat.data.shape[0]
        d = x.data.shape[-1]
        gf = g.reshape(-1, n, d)
        xf = x.data.reshape(-1, n, d)
        _accum(g_mat, np.sum(gf @ xf.transpose(0, 2, 1), axis=0))
        _accum(x, g_mat.data.T @ g)

    return _make(out_data, (g_mat, x), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor; x is perturbed coordinate-wise.
    """
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).data)
        flat[i] = orig - h
        lo = float(f(x).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
