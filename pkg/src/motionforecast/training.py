"""Training harness.

Loss is the ground truth's negative log-likelihood under the full mode
mixture, with the expectation over the discrete behavior mode computed
exactly by marginalization. No sampling or reparameterization is
involved; by default the mode weights enter the loss as constants (no
gradient through the categorical), switchable via the latent_grad_flow
flag.

Also here: node-dropout occlusion simulation, mirror augmentation,
horizon curriculum with per-iteration random shrink, the Adam optimizer,
and the epoch loop with early stopping.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, fields

import numpy as np

from motionforecast import diffcore as dc
from motionforecast import rotmath
from motionforecast.errors import NumericalError, ParseError
from motionforecast.kindata import NEUTRAL_STATE, states_from_frames

_BOOL_KEYS = {"mirror_augment", "latent_grad_flow", "horizon_shrink"}
_INT_KEYS = {
    "batch_size", "max_epochs", "patience", "history",
    "start_horizon", "target_horizon", "ramp_epochs", "seed",
}
_FLOAT_KEYS = {"learning_rate", "node_dropout_p"}
_STR_KEYS = {"optimizer"}


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    max_epochs: int = 50
    patience: int = 10
    history: int = 4  # observed frames before t=0 (window length H+1)
    start_horizon: int = 5
    target_horizon: int = 25
    ramp_epochs: int = 10
    node_dropout_p: float = 0.0
    mirror_augment: bool = False
    latent_grad_flow: bool = False
    horizon_shrink: bool = True  # per-iteration random horizon shrink
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.start_horizon > self.target_horizon:
            raise ValueError("start_horizon must not exceed target_horizon")
        if not 0.0 <= self.node_dropout_p <= 1.0:
            raise ValueError("node_dropout_p must be in [0, 1]")


def parse_train_config(text):
    """Line-based `key = value` config; unknown keys are errors."""
    values = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in _BOOL_KEYS:
            if value.lower() not in ("true", "false"):
                raise ParseError(f"boolean expected for {key}", line=lineno)
            values[key] = value.lower() == "true"
        elif key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        else:
            values[key] = value
    return TrainConfig(**values)


def write_train_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


# ---------------------------------------------------------------------------
# loss


def loss_t(pi, modes, y, latent_grad_flow=False):
    """Negative mixture log-likelihood (scalar tensor).

    pi: (B, Z) tensor; modes: per-mode dict of abs_means/abs_covs tensor
    lists from the model's forecast; y: (B, T, N, 4) ground truth. The
    expectation over the discrete mode is computed exactly by
    marginalization (log-sum-exp over modes of the mode's joint
    log-likelihood plus its log weight); no sampling or
    reparameterization is involved. Gradients reach each mode weighted
    by its posterior responsibility, which is what lets modes specialize
    on distinct behaviors. Mode log-likelihoods are summed over
    timesteps and nodes; the result is averaged over the batch.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    horizon = len(modes[0]["abs_means"])
    if y.shape[1] != horizon:
        raise ValueError(f"truth horizon {y.shape[1]} != forecast horizon {horizon}")
    pi_used = pi if latent_grad_flow else dc.detach(pi)
    b = y.shape[0]
    per_mode_ll = []
    for mode in modes:
        ll = None
        for t in range(horizon):
            truth = dc.Tensor(y[:, t])
            eps = dc.quat_log(dc.quat_product(truth, dc.quat_conj(mode["abs_means"][t])))
            lp = dc.mvn_log_pdf(eps, mode["abs_covs"][t])  # (B, N)
            step = dc.tensor_sum(lp, axis=-1)  # (B,)
            ll = step if ll is None else dc.add(ll, step)
        per_mode_ll.append(dc.reshape(ll, (b, 1)))
    joint = dc.add(dc.log(pi_used), dc.concat(per_mode_ll, axis=1))  # (B, Z)
    out = dc.mul(dc.tensor_mean(dc.log_sum_exp(joint, axis=-1)), -1.0)
    if not np.isfinite(out.data):
        raise NumericalError("non-finite training loss")
    return out


def model_nll(model, x_batch, y_batch, latent_grad_flow=False):
    """Loss value without building gradients (parameters treated constant)."""
    pi, modes = model.forecast_t(x_batch, y_batch.shape[1])
    return float(loss_t(pi, modes, y_batch, latent_grad_flow).data)


# ---------------------------------------------------------------------------
# augmentation


def node_dropout(x, rng, p):
    """Simulate occlusion: per node, with probability p, replace a random
    run of most-recent states (ending at t = 0) by the neutral state."""
    x = np.array(x, copy=True)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, h1, n, _ = x.shape
    for bi in range(b):
        for node in range(n):
            if rng.random() < p:
                k = int(rng.integers(1, h1 + 1))
                x[bi, h1 - k :, node, :] = NEUTRAL_STATE
    return x[0] if squeeze else x


def mirror_quat(q):
    """Reflect rotation(s) across the sagittal (x-z) plane: conjugation by
    diag(1, -1, 1), i.e. negate the x and z tangent components."""
    out = np.array(q, copy=True)
    out[..., 1] = -out[..., 1]
    out[..., 3] = -out[..., 3]
    return rotmath.normalize(out)


def mirror_augment(x, y, skeleton):
    """Swap left/right node channels and reflect every rotation.

    x: (..., H+1, N, 8) states; y: (..., T, N, 4) target frames. Applying
    the augmentation twice is the identity.
    """
    if not skeleton.mirror_pairs:
        raise ValueError("skeleton declares no left/right symmetry pairs")
    perm = skeleton.mirror_index()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_m = x[..., perm, :].copy()
    x_m[..., :4] = mirror_quat(x_m[..., :4])
    x_m[..., 4:] = mirror_quat(x_m[..., 4:])
    y_m = mirror_quat(y[..., perm, :])
    return x_m, y_m


def horizon_schedule(epoch, cfg):
    """Deterministic curriculum horizon for an epoch."""
    if cfg.ramp_epochs <= 0 or epoch >= cfg.ramp_epochs:
        return cfg.target_horizon
    span = cfg.target_horizon - cfg.start_horizon
    return cfg.start_horizon + (span * epoch) // cfg.ramp_epochs


def shrink_horizon(current, rng):
    """Per-iteration uniform random shrink into [1, current]."""
    return int(rng.integers(1, current + 1))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1**self.t)
            v_hat = self.v[i] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg, params):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.learning_rate)
    if cfg.optimizer == "sgd":
        class _SGD:
            def __init__(self, params, lr):
                self.params, self.lr = list(params), lr

            def step(self):
                for p in self.params:
                    if p.grad is not None:
                        p.data = p.data - self.lr * p.grad

        return _SGD(params, cfg.learning_rate)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# dataset windows and epoch loop


def windows_from_dataset(dataset, cfg):
    """(x, y) arrays from a synthetic dataset, anchored at its branch frame."""
    t0 = dataset.branch_frame
    start = t0 - cfg.history
    if start < 0:
        raise ValueError("history longer than available frames before t=0")
    xs, ys = [], []
    for seq in dataset.sequences:
        if seq.n_frames < t0 + cfg.target_horizon + 1:
            raise ValueError("sequence shorter than target horizon")
        frames = seq.frames
        xs.append(states_from_frames(frames[start : t0 + 1]))
        ys.append(frames[t0 + 1 : t0 + 1 + cfg.target_horizon])
    return np.stack(xs), np.stack(ys)


@dataclass
class TrainResult:
    model: object
    log_rows: list  # (epoch, train_nll, val_nll, horizon, seconds)
    best_val_nll: float
    best_epoch: int
    diverged: bool = False


def _snapshot(model):
    return [p.data.copy() for p in model.parameters()]


def _restore(model, snap):
    for p, data in zip(model.parameters(), snap):
        p.data = data.copy()


def train(model, train_xy, val_xy, cfg, skeleton=None, log_callback=None):
    """Minibatch training with curriculum, augmentation, and early stopping.

    train_xy/val_xy: (x, y) array pairs. On divergence (non-finite loss)
    training aborts and the last finite-epoch parameters are retained.
    """
    rng = np.random.default_rng(cfg.seed)
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    params = model.parameters()
    opt = make_optimizer(cfg, params)
    log_rows = []
    best_val = np.inf
    best_epoch = -1
    best_snap = _snapshot(model)
    last_good = _snapshot(model)
    bad_epochs = 0
    diverged = False
    n_train = x_train.shape[0]

    for epoch in range(cfg.max_epochs):
        tic = time.monotonic()
        epoch_horizon = horizon_schedule(epoch, cfg)
        order = rng.permutation(n_train)
        epoch_losses = []
        try:
            for lo in range(0, n_train, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                xb = x_train[idx]
                yb = y_train[idx]
                if cfg.mirror_augment and skeleton is not None and rng.random() < 0.5:
                    xb, yb = mirror_augment(xb, yb, skeleton)
                if cfg.node_dropout_p > 0:
                    xb = node_dropout(xb, rng, cfg.node_dropout_p)
                horizon = (
                    shrink_horizon(epoch_horizon, rng)
                    if cfg.horizon_shrink
                    else epoch_horizon
                )
                pi, modes = model.forecast_t(xb, horizon)
                loss = loss_t(pi, modes, yb[:, :horizon], cfg.latent_grad_flow)
                dc.zero_grad(params)
                dc.backward(loss)
                opt.step()
                epoch_losses.append(float(loss.data))
            val_nll = model_nll(model, x_val, y_val, cfg.latent_grad_flow)
        except (NumericalError, np.linalg.LinAlgError):
            # overflow in the forward pass surfaces as a singular
            # covariance; treat it the same as a non-finite loss
            diverged = True
            _restore(model, last_good)
            break
        train_nll = float(np.mean(epoch_losses))
        seconds = time.monotonic() - tic
        row = (epoch, train_nll, val_nll, epoch_horizon, seconds)
        log_rows.append(row)
        if log_callback is not None:
            log_callback(row)
        if not np.isfinite(val_nll):
            diverged = True
            _restore(model, last_good)
            break
        last_good = _snapshot(model)
        if val_nll < best_val:
            best_val = val_nll
            best_epoch = epoch
            best_snap = _snapshot(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    if not diverged:
        _restore(model, best_snap)
    return TrainResult(
        model=model,
        log_rows=log_rows,
        best_val_nll=best_val,
        best_epoch=best_epoch,
        diverged=diverged,
    )


def write_log_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,train_nll,val_nll,horizon,seconds\n")
        for epoch, train_nll, val_nll, horizon, seconds in rows:
            fh.write(f"{epoch},{train_nll:.6f},{val_nll:.6f},{horizon},{seconds:.3f}\n")
