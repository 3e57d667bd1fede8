"""The forecasting network.

A typed-graph GRU encoder compresses each node's (pose, differential)
history into a hidden row h; a typed-graph linear head turns h into a
categorical distribution over discrete behavior modes; a typed-graph GRU
decoder, conditioned on the mode and h, autoregressively emits one
rotation distribution (mean differential quaternion + tangent
covariance) per node per step. Mode distributions over differential
rotations are integrated into distributions over absolute poses, with
the categorical mode weights reused as mixture coefficients.

Inputs may be a single window (H+1, N, 8) or a batch (B, H+1, N, 8).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from motionforecast import diffcore as dc
from motionforecast import rotmath, so3stats
from motionforecast.kindata import states_from_frames
from motionforecast.tglayers import TypedGRU, TypedLinear
from motionforecast.tglayers import param_count as _layer_param_count

CHECKPOINT_MAGIC = b"MOTRON1"
COV_DIAG_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    classes: list  # semantic class id per node; length N
    d_hidden: int = 32
    n_modes: int = 5
    max_horizon: int = 25
    d_state: int = 8
    latent_grad_flow: bool = False

    def __post_init__(self):
        if self.n_modes < 1 or self.d_hidden < 1:
            raise ValueError("n_modes and d_hidden must be positive")

    @property
    def n_nodes(self):
        return len(self.classes)


@dataclass(frozen=True)
class ForecastResult:
    """Per-mode integrated and differential output distributions.

    means/covs are over absolute poses after integration; diff_means and
    diff_covs are the per-step distributions over differential rotations
    the motions are sampled from.
    """

    mode_weights: np.ndarray  # (Z,)
    means: np.ndarray  # (Z, T, N, 4)
    covs: np.ndarray  # (Z, T, N, 3, 3)
    diff_means: np.ndarray  # (Z, T, N, 4)
    diff_covs: np.ndarray  # (Z, T, N, 3, 3)

    def mixture_at(self, t, node):
        comps = [
            so3stats.ConcentratedGaussianSO3(mean=self.means[z, t, node], cov=self.covs[z, t, node])
            for z in range(len(self.mode_weights))
        ]
        return so3stats.MixtureSO3(weights=self.mode_weights, components=comps)

    @property
    def horizon(self):
        return self.means.shape[1]


class MotionModel:
    def __init__(self, config, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        classes = config.classes
        dh = config.d_hidden
        self.enc_gru = TypedGRU(classes, config.d_state, dh, rng)
        self.enc_head = TypedLinear(classes, dh, dh, rng)
        self.latent_head = TypedLinear(classes, dh, config.n_modes, rng)
        d_dec_in = config.n_modes + dh + 4
        self.dec_gru = TypedGRU(classes, d_dec_in, dh, rng)
        # Components of a mixture must start out diverse: identical modes
        # receive identical responsibility-weighted gradients and would
        # never separate. Boost the decoder weights on the mode one-hot
        # channels so each mode begins with a distinct dynamic.
        if config.n_modes > 1:
            for gate in ("r", "z", "n"):
                for w in self.dec_gru.w_gates[gate]:
                    w.data[: config.n_modes, :] *= 4.0
        self.out_head = TypedLinear(classes, dh, 10, rng)
        # Start the decoder as "no motion, small uncertainty": per-frame
        # rotation increments are small, so bias the mean toward the
        # identity quaternion and the Cholesky diagonal toward a small
        # scale, with damped weights so the bias dominates at first.
        for w in self.out_head.weights:
            w.data *= 0.1
        for b in self.out_head.biases:
            b.data[0] = 3.0
            b.data[4:7] = -3.0
        self._layers = [self.enc_gru, self.enc_head, self.latent_head, self.dec_gru, self.out_head]

    # -- parameters -----------------------------------------------------

    def parameters(self):
        params = []
        for layer in self._layers:
            params += layer.parameters()
        return params

    def named_parameters(self):
        names = ["enc_gru", "enc_head", "latent_head", "dec_gru", "out_head"]
        out = []
        for name, layer in zip(names, self._layers):
            out += layer.named_parameters(prefix=name + ".")
        return out

    def param_count(self):
        return _layer_param_count(self._layers)

    # -- forward passes (tensor path, used by both training and inference)

    @staticmethod
    def _batched(x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            return x[None], True
        return x, False

    def encode(self, x):
        """History states (B, H+1, N, 8) -> hidden tensor (B, N, D_H)."""
        x, _ = self._batched(x)
        steps = [dc.Tensor(x[:, t]) for t in range(x.shape[1])]
        _, h_final, _ = self.enc_gru.run(steps)
        return self.enc_head(h_final)

    def latent_distribution_t(self, h):
        """Mode probabilities: node logits averaged, then softmax. (B, Z)."""
        logits = self.latent_head(h)  # (B, N, Z)
        return dc.softmax(dc.tensor_mean(logits, axis=-2), axis=-1)

    def decode_t(self, h, z, horizon):
        """Per-step differential distributions for one mode.

        Returns lists of horizon tensors: means (B, N, 4) and covariances
        (B, N, 3, 3). The decoder input at each step concatenates the
        one-hot mode, the node's hidden row, and the previous step's
        predicted mean differential (identity at the first step).
        """
        b, n = h.data.shape[0], h.data.shape[1]
        onehot = np.zeros((b, n, self.config.n_modes))
        onehot[..., z] = 1.0
        onehot_t = dc.Tensor(onehot)
        prev = dc.Tensor(np.broadcast_to(rotmath.IDENTITY, (b, n, 4)).copy())
        h_dec = h
        g_mat = self.dec_gru.influence0
        means, covs = [], []
        for _ in range(horizon):
            x_t = dc.concat([onehot_t, h, prev], axis=-1)
            h_dec, g_mat = self.dec_gru.step(x_t, h_dec, g_mat)
            out = self.out_head(h_dec)  # (B, N, 10)
            mean = dc.normalize_quat(out[..., :4])
            diag = dc.add(dc.softplus(out[..., 4:7]), COV_DIAG_FLOOR)
            chol = dc.build_lower_tri3(diag, out[..., 7:10])
            cov = dc.matmul(chol, dc.transpose(chol))
            means.append(mean)
            covs.append(cov)
            prev = mean
        return means, covs

    def integrate_t(self, q0, diff_means, diff_covs):
        """Fold per-step differential distributions into absolute ones.

        q0: (B, N, 4) last observed pose (constant). Matches the closed
        composition rule: new cov = cov + R(mean) step_cov R(mean)^T.
        """
        q0_t = dc.Tensor(q0)
        abs_means, abs_covs = [], []
        mean_prev = q0_t
        cov_prev = None
        for mean_d, cov_d in zip(diff_means, diff_covs):
            rot = dc.quat_to_rotmat(mean_prev)
            rotated = dc.matmul(dc.matmul(rot, cov_d), dc.transpose(rot))
            cov_prev = rotated if cov_prev is None else dc.add(cov_prev, rotated)
            mean_prev = dc.normalize_quat(dc.quat_product(mean_prev, mean_d))
            abs_means.append(mean_prev)
            abs_covs.append(cov_prev)
        return abs_means, abs_covs

    def forecast_t(self, x, horizon):
        """Full tensor-path forecast for every mode.

        Returns (pi tensor (B, Z), per-mode dict with diff/abs mean and
        cov tensor lists). x is a (B, H+1, N, 8) state array.
        """
        x, _ = self._batched(x)
        h = self.encode(x)
        pi = self.latent_distribution_t(h)
        q0 = x[:, -1, :, :4]
        modes = []
        for z in range(self.config.n_modes):
            diff_means, diff_covs = self.decode_t(h, z, horizon)
            abs_means, abs_covs = self.integrate_t(q0, diff_means, diff_covs)
            modes.append(
                {
                    "diff_means": diff_means,
                    "diff_covs": diff_covs,
                    "abs_means": abs_means,
                    "abs_covs": abs_covs,
                }
            )
        return pi, modes

    # -- numpy-facing outputs ------------------------------------------

    def predict_distribution(self, x, horizon):
        """ForecastResult for a single history window (H+1, N, 8)."""
        pi, modes = self.forecast_t(x, horizon)

        def gather(key):
            return np.stack(
                [np.stack([t.data[0] for t in m[key]], axis=0) for m in modes], axis=0
            )

        means = rotmath.normalize(gather("abs_means"))
        return ForecastResult(
            mode_weights=pi.data[0].copy(),
            means=means,
            covs=gather("abs_covs"),
            diff_means=rotmath.normalize(gather("diff_means")),
            diff_covs=gather("diff_covs"),
        )

    def sample_motions(self, x, horizon, count, rng, forecast=None):
        """Draw motions: mode by weight, then per-step differentials,
        integrated from the last observed pose. Returns (count, T, N, 4)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        fc = self.predict_distribution(x, horizon) if forecast is None else forecast
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[0]
        q0 = x[-1, :, :4]
        n = q0.shape[0]
        z_draws = rng.choice(self.config.n_modes, size=count, p=fc.mode_weights)
        chols = np.linalg.cholesky(fc.diff_covs)  # (Z, T, N, 3, 3)
        out = np.empty((count, horizon, n, 4))
        for z in range(self.config.n_modes):
            idx = np.nonzero(z_draws == z)[0]
            if idx.size == 0:
                continue
            s = idx.size
            q = np.broadcast_to(q0, (s, n, 4)).copy()
            for t in range(horizon):
                u = rng.standard_normal((s, n, 3))
                eps = np.einsum("nij,snj->sni", chols[z, t], u)
                diff = rotmath.quat_mul(rotmath.exp_so3(eps), fc.diff_means[z, t])
                q = rotmath.quat_mul(q, diff)
                out[idx, t] = q
        return out

    def ml_mode_motion(self, x, horizon, forecast=None):
        """Integrated mean motion of the most likely mode (ties: lowest index)."""
        fc = self.predict_distribution(x, horizon) if forecast is None else forecast
        z = int(np.argmax(fc.mode_weights))
        return fc.means[z].copy()

    def w_mean_motion(self, x, horizon, forecast=None):
        """Per-step per-node weighted quaternion mean over all mode means."""
        fc = self.predict_distribution(x, horizon) if forecast is None else forecast
        t_steps, n = fc.means.shape[1], fc.means.shape[2]
        out = np.empty((t_steps, n, 4))
        for t in range(t_steps):
            for j in range(n):
                out[t, j] = rotmath.weighted_quat_mean(fc.means[:, t, j], fc.mode_weights)
        return out

    def forecast_frames(self, frames, horizon):
        """Convenience: ForecastResult from raw history frames (H+1, N, 4)."""
        return self.predict_distribution(states_from_frames(frames), horizon)


# ---------------------------------------------------------------------------
# parameter counting


def param_count(config, typed=True, include_influence=True):
    """Trainable scalar count for a configuration.

    typed=False counts the untyped variant (every node its own class);
    include_influence=False excludes the N x N graph matrices, isolating
    the weight-sharing effect.
    """
    classes = list(config.classes) if typed else list(range(config.n_nodes))
    cfg = ModelConfig(
        classes=classes,
        d_hidden=config.d_hidden,
        n_modes=config.n_modes,
        max_horizon=config.max_horizon,
        d_state=config.d_state,
        latent_grad_flow=config.latent_grad_flow,
    )
    model = MotionModel(cfg)
    total = model.param_count()
    if not include_influence:
        n2 = config.n_nodes**2
        # enc/dec GRUs carry G0 and Gta; each linear head carries one G
        total -= 2 * 2 * n2 + 3 * n2
    return total


# ---------------------------------------------------------------------------
# checkpoint container


def _write_block(fh, payload):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(fh):
    (size,) = struct.unpack("<I", fh.read(4))
    return fh.read(size)


def save_checkpoint(model, path):
    """Versioned binary container: magic, JSON config block, then named
    float32 little-endian parameter blocks."""
    named = model.named_parameters()
    cfg = model.config
    config_payload = json.dumps(
        {
            "classes": list(cfg.classes),
            "d_hidden": cfg.d_hidden,
            "n_modes": cfg.n_modes,
            "max_horizon": cfg.max_horizon,
            "d_state": cfg.d_state,
            "latent_grad_flow": cfg.latent_grad_flow,
        }
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    _write_block(buf, config_payload)
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        _write_block(buf, name.encode("utf-8"))
        shape = p.data.shape
        buf.write(struct.pack("<I", len(shape)))
        for dim in shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, skeleton_classes=None):
    """Load a model; errors if the stored class map mismatches the skeleton."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        cfg_dict = json.loads(_read_block(fh).decode("utf-8"))
        config = ModelConfig(
            classes=list(cfg_dict["classes"]),
            d_hidden=cfg_dict["d_hidden"],
            n_modes=cfg_dict["n_modes"],
            max_horizon=cfg_dict["max_horizon"],
            d_state=cfg_dict["d_state"],
            latent_grad_flow=cfg_dict["latent_grad_flow"],
        )
        if skeleton_classes is not None and list(skeleton_classes) != config.classes:
            raise ValueError(
                f"checkpoint class map {config.classes} does not match "
                f"skeleton class map {list(skeleton_classes)}"
            )
        model = MotionModel(config)
        params = dict(model.named_parameters())
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            name = _read_block(fh).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))), dtype="<f4")
            if name not in params:
                raise ValueError(f"unknown parameter block {name!r}")
            if params[name].data.shape != shape:
                raise ValueError(f"shape mismatch for {name!r}")
            params[name].data = data.reshape(shape).astype(np.float64)
    return model
