"""Forecast quality metrics.

Probabilistic metrics over sampled motion sets (KDE negative
log-likelihood, best-of-N displacement errors, sample diversity,
multimodal variants grouped by starting-pose similarity) plus
deterministic ones (Euler-angle-stack error, per-joint position error),
a rigid-bone audit, and the zero-velocity baseline. Position-space
metrics expect arrays produced by forward kinematics.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from motionforecast import rotmath
from motionforecast.kindata import forward_kinematics

BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class SampleSet:
    """S sampled motions: (S, T, N, 3) positions or (S, T, N, 4) quaternions."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] not in (3, 4):
            raise ValueError("expected (S, T, N, 3) positions or (S, T, N, 4) quaternions")
        if arr.shape[0] < 1:
            raise ValueError("at least one sample required")
        object.__setattr__(self, "data", arr)

    @property
    def is_positions(self):
        return self.data.shape[-1] == 3

    @property
    def count(self):
        return self.data.shape[0]


@dataclass
class MetricReport:
    name: str
    horizons_ms: list
    values: list
    sample_count: int = 0
    clip: float | None = None
    threshold: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.horizons_ms) != sorted(set(self.horizons_ms)):
            raise ValueError("horizons must be strictly increasing")
        if len(self.horizons_ms) != len(self.values):
            raise ValueError("one value per horizon required")


# ---------------------------------------------------------------------------
# probabilistic metrics


_KNN_K = 16
_KNN_SCALE = 0.6


def _knn_distances(points, k):
    """Distance from each point to its k-th nearest neighbor, chunked."""
    sq = np.sum(points**2, axis=1)
    out = np.empty(points.shape[0])
    step = max(1, 2**22 // points.shape[0])  # cap the pairwise block size
    for lo in range(0, points.shape[0], step):
        block = points[lo : lo + step]
        d2 = sq[lo : lo + step, None] + sq[None, :] - 2.0 * block @ points.T
        out[lo : lo + step] = np.sqrt(np.maximum(np.partition(d2, k, axis=1)[:, k], 0.0))
    return out


def _kde_log_density(points, query, floor_warnings, bandwidth=None):
    """Gaussian KDE over (S, 3) points evaluated at one query point.

    With an explicit bandwidth all kernels share that fixed
    per-dimension width. By default each sample point instead carries
    its own isotropic width proportional to the distance to its k-th
    nearest neighbor (sample-point adaptive KDE): a single global rule
    badly oversmooths multimodal sample clouds, while the local rule
    stays sharp within each mode yet remains a properly normalized
    density.
    """
    s = points.shape[0]
    d = points.shape[1]
    if bandwidth is not None:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (d,))
        low = bw < BANDWIDTH_FLOOR
        if np.any(low):
            bw = np.where(low, BANDWIDTH_FLOOR, bw)
            floor_warnings.append(True)
        z = (query[None, :] - points) / bw[None, :]
        log_norm = -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(bw))
        log_kernels = log_norm - 0.5 * np.sum(z * z, axis=1)
    else:
        bwi = _KNN_SCALE * _knn_distances(points, min(_KNN_K, s - 1))
        low = bwi < BANDWIDTH_FLOOR
        if np.any(low):
            bwi = np.where(low, BANDWIDTH_FLOOR, bwi)
            floor_warnings.append(True)
        z = (query[None, :] - points) / bwi[:, None]
        log_kernels = (
            -0.5 * d * np.log(2 * np.pi) - d * np.log(bwi) - 0.5 * np.sum(z * z, axis=1)
        )
    m = log_kernels.max()
    return m + np.log(np.mean(np.exp(log_kernels - m)))


def kde_nll(samples, truth, clip=20.0, bandwidth=None):
    """Per-timestep NLL of the truth under a per-joint 3-d Gaussian KDE.

    samples: SampleSet (or array) of positions (S, T, N, 3), S >= 2;
    truth: (T, N, 3). Joint log-densities are summed, negated, and the
    per-timestep value clipped at `clip`. Bandwidths are sample-point
    adaptive (nearest-neighbor rule) unless a fixed per-dimension
    bandwidth is given. Returns (per_step, total).
    """
    data = samples.data if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if data.shape[0] < 2:
        raise ValueError("KDE requires at least 2 samples")
    if data.shape[1:] != truth.shape:
        raise ValueError(f"sample shape {data.shape[1:]} != truth shape {truth.shape}")
    t_steps, n = truth.shape[0], truth.shape[1]
    per_step = np.empty(t_steps)
    floor_hits = []
    for t in range(t_steps):
        log_p = 0.0
        for j in range(n):
            log_p += _kde_log_density(data[:, t, j], truth[t, j], floor_hits, bandwidth)
        per_step[t] = min(-log_p, clip)
    if floor_hits:
        warnings.warn("degenerate sample spread; bandwidth floor applied", RuntimeWarning)
    return per_step, float(per_step.sum())


def ade_fde_best_of_n(samples, truth):
    """Best-of-N displacement errors over positions.

    ADE takes each sample's mean-over-(timestep, joint) Euclidean error
    first, then the minimum over samples; FDE does the same with the
    final step only.
    """
    data = samples.data if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    err = np.linalg.norm(data - truth[None], axis=-1)  # (S, T, N)
    ade = float(err.mean(axis=(1, 2)).min())
    fde = float(err[:, -1].mean(axis=-1).min())
    return ade, fde


def apd(samples):
    """Mean pairwise L2 distance between flattened sample trajectories."""
    data = samples.data if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    s = data.shape[0]
    if s < 2:
        raise ValueError("APD requires at least 2 samples")
    flat = data.reshape(s, -1)
    total = 0.0
    for i in range(s):
        total += np.linalg.norm(flat[i + 1 :] - flat[i], axis=1).sum()
    return float(total / (s * (s - 1) / 2))


def mm_group(start_poses, threshold):
    """Group motions by t=0 pose proximity.

    start_poses: (M, N, 3) positions at prediction time. Returns, for
    each query index, the indices whose flattened start pose lies within
    `threshold` (Euclidean); the query always includes itself.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    flat = np.asarray(start_poses, dtype=np.float64).reshape(len(start_poses), -1)
    dists = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    return [np.nonzero(dists[i] <= threshold)[0] for i in range(len(flat))]


def mmade_mmfde(samples_per_query, futures, groups):
    """Multimodal ADE/FDE: mean over each group's futures of best-of-N error.

    samples_per_query: list of (S, T, N, 3) sample arrays, one per query;
    futures: (M, T, N, 3) ground-truth futures; groups: from mm_group.
    Returns per-query (MMADE, MMFDE) arrays.
    """
    futures = np.asarray(futures, dtype=np.float64)
    mmade = np.empty(len(groups))
    mmfde = np.empty(len(groups))
    for qi, group in enumerate(groups):
        ades, fdes = zip(*(ade_fde_best_of_n(samples_per_query[qi], futures[g]) for g in group))
        mmade[qi] = np.mean(ades)
        mmfde[qi] = np.mean(fdes)
    return mmade, mmfde


# ---------------------------------------------------------------------------
# deterministic metrics


def _wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2 * np.pi)


def mae_l2(pred, truth):
    """Per-timestep L2 norm of the stacked wrapped ZYX Euler-angle errors.

    pred/truth: (T, N, 4) quaternions or batched (B, T, N, 4); batched
    input averages the per-step scalar over the batch.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch between prediction and truth")
    diff = _wrap_angle(rotmath.quat_to_euler_zyx(pred) - rotmath.quat_to_euler_zyx(truth))
    per_step = np.linalg.norm(diff.reshape(diff.shape[:-2] + (-1,)), axis=-1)
    if pred.ndim == 4:
        per_step = per_step.mean(axis=0)
    return per_step


def mpjpe(pred_quats, truth_quats, skeleton):
    """Mean per-joint position error after forward kinematics, in mm."""
    p_pred = forward_kinematics(skeleton, np.asarray(pred_quats, dtype=np.float64))
    p_truth = forward_kinematics(skeleton, np.asarray(truth_quats, dtype=np.float64))
    err = np.linalg.norm(p_pred - p_truth, axis=-1)  # (..., T, N)
    return err.mean(axis=-1) * 1000.0


def bone_deformation_audit(positions, skeleton):
    """Per-step (mean, max) of |bone length - reference length| in meters."""
    positions = np.asarray(positions, dtype=np.float64)
    children = [j for j, p in enumerate(skeleton.parents) if p >= 0]
    if not children:
        z = np.zeros(positions.shape[0])
        return z, z.copy()
    lengths = np.stack(
        [np.linalg.norm(positions[:, j] - positions[:, skeleton.parents[j]], axis=-1) for j in children],
        axis=1,
    )
    ref = np.array([np.linalg.norm(skeleton.offsets[j]) for j in children])
    deform = np.abs(lengths - ref[None, :])
    return deform.mean(axis=1), deform.max(axis=1)


def zero_velocity_baseline(x, horizon):
    """Repeat the last observed pose for `horizon` steps.

    x: history states (H+1, N, 8) or frames (H+1, N, 4).
    """
    x = np.asarray(x, dtype=np.float64)
    last = x[-1, :, :4]
    return np.broadcast_to(last, (horizon,) + last.shape).copy()


# ---------------------------------------------------------------------------
# report output


def write_report_csv(path, report):
    with open(path, "w") as fh:
        fh.write("horizon_ms,value\n")
        for h, v in zip(report.horizons_ms, report.values):
            fh.write(f"{h},{v:.6f}\n")


def write_report_json(path, reports):
    payload = []
    for r in reports:
        entry = {
            "metric": r.name,
            "horizons_ms": list(map(float, r.horizons_ms)),
            "values": list(map(float, r.values)),
            "sample_count": r.sample_count,
        }
        if r.clip is not None:
            entry["clip"] = r.clip
        if r.threshold is not None:
            entry["threshold"] = r.threshold
        entry.update(r.extra)
        payload.append(entry)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_line_chart_svg(path, series, title="", x_label="", y_label="",
                         width=640, height=400):
    """Minimal multi-series SVG line chart.

    series: list of (label, xs, ys). Axes are linear with 5 ticks each.
    """
    margin = 60
    xs_all = np.concatenate([np.asarray(xs, dtype=float) for _, xs, _ in series])
    ys_all = np.concatenate([np.asarray(ys, dtype=float) for _, _, ys in series])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 15}" text-anchor="middle" '
        f'font-size="11">{x_label}</text>',
        f'<text x="15" y="{height / 2:.0f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 15 {height / 2:.0f})">{y_label}</text>',
    ]
    for i in range(6):
        xv = x_lo + (x_hi - x_lo) * i / 5
        yv = y_lo + (y_hi - y_lo) * i / 5
        parts.append(
            f'<text x="{px(xv):.1f}" y="{height - margin + 15}" text-anchor="middle" '
            f'font-size="9">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{margin - 5}" y="{py(yv):.1f}" text-anchor="end" '
            f'font-size="9">{yv:.3g}</text>'
        )
    for k, (label, xs, ys) in enumerate(series):
        color = colors[k % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - margin + 5}" y="{margin + 14 * k}" font-size="10" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
