"""Skeletons, motion sequences, and synthetic data.

File formats (UTF-8, line based, '#' comments):

Skeleton:
    SKELETON v1
    N <count>
    JOINT <idx> <name> <class> <parent|-1> <ox> <oy> <oz>
    MIRROR <idx_a> <idx_b>        (optional, repeated)

Motion:
    MOTION v1
    SKELETON <skeleton-file-path>
    FPS <float>
    FRAMES <T>
    <T lines of N*4 reals: w x y z per joint>

The synthetic generator produces chain/arm scenarios whose exact
generative distribution is known, so learned models can be scored
against an analytic likelihood floor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from motionforecast import rotmath, so3stats
from motionforecast.errors import ParseError

SCENARIOS = ("bimodal-pendulum", "trimodal-arm", "constant-velocity")


@dataclass(frozen=True)
class Skeleton:
    names: list
    classes: list  # semantic class id per joint
    parents: list  # parent index, -1 for roots
    offsets: np.ndarray  # (N, 3) bone offsets in meters
    mirror_pairs: list = field(default_factory=list)  # (left, right) index pairs

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.classes) == len(self.parents) == n and self.offsets.shape == (n, 3)):
            raise ValueError("inconsistent skeleton arrays")
        for idx, parent in enumerate(self.parents):
            seen = set()
            node = idx
            while node != -1:
                if node in seen:
                    raise ValueError(f"parent cycle through joint {self.names[idx]}")
                seen.add(node)
                node = self.parents[node]
        involution = {}
        for a, b in self.mirror_pairs:
            involution[a] = b
            involution[b] = a
        for a, b in involution.items():
            if involution[b] != a:
                raise ValueError("mirror map is not an involution")

    @property
    def n_joints(self):
        return len(self.names)

    def mirror_index(self):
        """Permutation swapping mirrored joints (identity elsewhere)."""
        perm = np.arange(self.n_joints)
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm


@dataclass(frozen=True)
class MotionSequence:
    skeleton: Skeleton
    fps: float
    frames: np.ndarray  # (T, N, 4) unit quaternions

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames.ndim != 3 or self.frames.shape[0] < 1 or self.frames.shape[2] != 4:
            raise ValueError(f"bad frame tensor shape {self.frames.shape}")
        object.__setattr__(self, "frames", rotmath.normalize(self.frames))

    @property
    def n_frames(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# parsing


def _content_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_skeleton(text):
    lines = list(_content_lines(text))
    if not lines or lines[0][1] != "SKELETON v1":
        raise ParseError("expected header 'SKELETON v1'", line=lines[0][0] if lines else 1)
    it = iter(lines[1:])
    try:
        lineno, decl = next(it)
    except StopIteration:
        raise ParseError("missing 'N <count>' line") from None
    parts = decl.split()
    if len(parts) != 2 or parts[0] != "N":
        raise ParseError("expected 'N <count>'", line=lineno)
    count = int(parts[1])
    names = [None] * count
    classes = [None] * count
    parents = [None] * count
    offsets = np.zeros((count, 3))
    mirror_pairs = []
    for lineno, line in it:
        parts = line.split()
        if parts[0] == "JOINT":
            if len(parts) != 8:
                raise ParseError("JOINT needs idx name class parent ox oy oz", line=lineno)
            idx = int(parts[1])
            if not 0 <= idx < count:
                raise ParseError(f"joint index {idx} out of range", line=lineno)
            names[idx] = parts[2]
            classes[idx] = int(parts[3])
            parents[idx] = int(parts[4])
            offsets[idx] = [float(v) for v in parts[5:8]]
        elif parts[0] == "MIRROR":
            if len(parts) != 3:
                raise ParseError("MIRROR needs two indices", line=lineno)
            mirror_pairs.append((int(parts[1]), int(parts[2])))
        else:
            raise ParseError(f"unknown directive {parts[0]!r}", line=lineno)
    missing = [i for i, n in enumerate(names) if n is None]
    if missing:
        raise ParseError(f"missing JOINT lines for indices {missing}")
    try:
        return Skeleton(names=names, classes=classes, parents=parents, offsets=offsets,
                        mirror_pairs=mirror_pairs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_skeleton(skeleton):
    out = ["SKELETON v1", f"N {skeleton.n_joints}"]
    for i in range(skeleton.n_joints):
        ox, oy, oz = (float(v) for v in skeleton.offsets[i])
        out.append(
            f"JOINT {i} {skeleton.names[i]} {skeleton.classes[i]} {skeleton.parents[i]} "
            f"{ox!r} {oy!r} {oz!r}"
        )
    for a, b in skeleton.mirror_pairs:
        out.append(f"MIRROR {a} {b}")
    return "\n".join(out) + "\n"


def parse_motion(text, skeleton):
    lines = list(_content_lines(text))
    if not lines or lines[0][1] != "MOTION v1":
        raise ParseError("expected header 'MOTION v1'", line=lines[0][0] if lines else 1)
    header = {}
    body_start = None
    for i, (lineno, line) in enumerate(lines[1:], start=1):
        key = line.split()[0]
        if key in ("SKELETON", "FPS", "FRAMES"):
            header[key] = (lineno, line.split(None, 1)[1])
        else:
            body_start = i
            break
    for key in ("FPS", "FRAMES"):
        if key not in header:
            raise ParseError(f"missing {key} header")
    fps = float(header["FPS"][1])
    n_frames = int(header["FRAMES"][1])
    body = lines[body_start:] if body_start is not None else []
    if len(body) != n_frames:
        raise ParseError(f"expected {n_frames} frame lines, found {len(body)}")
    n = skeleton.n_joints
    frames = np.empty((n_frames, n, 4))
    for t, (lineno, line) in enumerate(body):
        values = line.split()
        if len(values) != 4 * n:
            raise ParseError(f"expected {4 * n} values, found {len(values)}", line=lineno)
        row = np.array([float(v) for v in values]).reshape(n, 4)
        norms = np.linalg.norm(row, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ParseError("non-unit quaternion beyond 1e-3", line=lineno)
        frames[t] = row
    return MotionSequence(skeleton=skeleton, fps=fps, frames=frames)


def write_motion(seq, skeleton_path="skeleton.txt"):
    out = ["MOTION v1", f"SKELETON {skeleton_path}", f"FPS {float(seq.fps)!r}",
           f"FRAMES {seq.n_frames}"]
    for frame in seq.frames:
        out.append(" ".join(f"{float(v)!r}" for v in frame.reshape(-1)))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# states and kinematics

NEUTRAL_STATE = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0])


def build_states(seq, window):
    """(H+1, N, 8) state tensor of (pose, differential) over a frame window.

    window is an inclusive (start, end) frame pair; the first frame's
    differential is the identity.
    """
    start, end = window
    if not (0 <= start <= end < seq.n_frames):
        raise ValueError(f"window {window} outside sequence of {seq.n_frames} frames")
    quats = seq.frames[start : end + 1]
    return states_from_frames(quats)


def states_from_frames(quats):
    """Stack (q, qdot) states from raw (T, N, 4) pose frames."""
    h1, n = quats.shape[0], quats.shape[1]
    states = np.empty((h1, n, 8))
    states[:, :, :4] = quats
    states[0, :, 4:] = rotmath.IDENTITY
    if h1 > 1:
        states[1:, :, 4:] = rotmath.diff_quat(quats[:-1], quats[1:])
    return states


def subsample(seq, target_fps):
    stride = seq.fps / target_fps
    if abs(stride - round(stride)) > 1e-9 or stride < 1:
        raise ValueError(f"fps {seq.fps} not an integer multiple of target {target_fps}")
    stride = int(round(stride))
    return MotionSequence(skeleton=seq.skeleton, fps=target_fps, frames=seq.frames[::stride].copy())


def forward_kinematics(skeleton, frame, root_position=(0.0, 0.0, 0.0)):
    """Joint positions from rotations; frame may be (N, 4) or batched (..., N, 4).

    p_i = p_parent + R_global_parent @ offset_i with roots anchored at
    root_position (their offset applied in the world frame).
    """
    frame = np.asarray(frame, dtype=np.float64)
    rots = rotmath.quat_to_rotmat(frame)  # (..., N, 3, 3)
    batch = frame.shape[:-2]
    n = skeleton.n_joints
    pos = np.zeros(batch + (n, 3))
    glob = np.zeros(batch + (n, 3, 3))
    root = np.asarray(root_position, dtype=np.float64)
    for i in range(n):
        p = skeleton.parents[i]
        if p == -1:
            pos[..., i, :] = root + skeleton.offsets[i]
            glob[..., i, :, :] = rots[..., i, :, :]
        else:
            pos[..., i, :] = pos[..., p, :] + np.einsum(
                "...ij,j->...i", glob[..., p, :, :], skeleton.offsets[i]
            )
            glob[..., i, :, :] = glob[..., p, :, :] @ rots[..., i, :, :]
    return pos


# ---------------------------------------------------------------------------
# synthetic data


def _axis_x(angle):
    return np.array([angle, 0.0, 0.0])


def pendulum_skeleton():
    """Five-joint symmetric chain used by the synthetic scenarios.

    Root at a fixed base; left/right shoulder-elbow pairs share classes
    and are mirror images across the sagittal (x-z) plane.
    """
    return Skeleton(
        names=["root", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow"],
        classes=[0, 1, 2, 1, 2],
        parents=[-1, 0, 1, 0, 3],
        offsets=np.array(
            [
                [0.0, 0.0, 1.0],
                [0.0, 0.2, 0.4],
                [0.0, 0.1, -0.3],
                [0.0, -0.2, 0.4],
                [0.0, -0.1, -0.3],
            ]
        ),
        mirror_pairs=[(1, 3), (2, 4)],
    )


@dataclass(frozen=True)
class SynthDataset:
    """Generated sequences plus the exact generative parameters.

    branch_frame is the index of the last "observed" frame (t = 0 of the
    forecasting problem); elbow branching starts on the next frame.
    """

    scenario: str
    skeleton: Skeleton
    sequences: list
    fps: float
    branch_frame: int
    noise_sigma: float
    osc_amp: float
    osc_period: float
    branch_rate: float
    branch_probs: np.ndarray
    phases: np.ndarray  # per-sequence oscillation phase
    branches: np.ndarray  # per-sequence sampled branch index
    spin_rates: np.ndarray  # per-sequence per-joint rates (constant-velocity)

    def shoulder_angle(self, phase, frame):
        return self.osc_amp * np.sin(2.0 * np.pi * frame / self.osc_period + phase)

    def branch_rates(self):
        """Signed elbow swing rate (rad/frame) per branch."""
        if self.scenario == "bimodal-pendulum":
            return np.array([self.branch_rate, -self.branch_rate])
        if self.scenario == "trimodal-arm":
            return np.array([self.branch_rate, -self.branch_rate, 0.0])
        return np.array([0.0])

    def mean_quat(self, seq_idx, joint, frame, branch):
        """Noise-free pose of a joint at an absolute frame index."""
        phase = self.phases[seq_idx]
        if self.scenario == "constant-velocity":
            return rotmath.exp_so3(self.spin_rates[seq_idx, joint] * frame)
        side = 1.0 if joint in (1, 2) else -1.0
        if joint == 0:
            return rotmath.IDENTITY.copy()
        if joint in (1, 3):
            return rotmath.exp_so3(_axis_x(side * self.shoulder_angle(phase, frame)))
        # elbows: identity during history, branch swing afterwards
        steps = max(0, frame - self.branch_frame)
        rate = self.branch_rates()[branch]
        return rotmath.exp_so3(_axis_x(side * rate * steps))

    def analytic_mixture(self, seq_idx, joint, step_ahead):
        """Exact conditional marginal of a joint's pose step_ahead frames
        past t = 0, given the recorded pose at t = 0.

        The per-frame tangent noise enters the differential, so the pose
        deviation accumulated up to t = 0 persists into the future: the
        conditional mean is q_obs * mean(t0)^-1 * mean(t0 + s) and only
        the s post-branch noise steps contribute to the covariance.
        """
        frame = self.branch_frame + step_ahead
        q_obs = self.sequences[seq_idx].frames[self.branch_frame, joint]
        carry = rotmath.quat_mul(
            q_obs,
            rotmath.quat_conj(
                self.mean_quat(seq_idx, joint, self.branch_frame, self.branches[seq_idx])
            ),
        )
        cov = step_ahead * self.noise_sigma**2 * np.eye(3)
        probs = self.branch_probs
        comps = [
            so3stats.ConcentratedGaussianSO3(
                mean=rotmath.quat_mul(carry, self.mean_quat(seq_idx, joint, frame, b)),
                cov=cov,
            )
            for b in range(len(probs))
        ]
        if joint not in (2, 4) or self.scenario == "constant-velocity":
            comps = comps[:1]
            probs = np.array([1.0])
        return so3stats.MixtureSO3(weights=probs, components=comps)

    def analytic_nll(self, seq_idx, step_ahead, joints=None):
        """Negative log-likelihood of the recorded truth at a future step."""
        seq = self.sequences[seq_idx]
        frame = self.branch_frame + step_ahead
        joints = range(self.skeleton.n_joints) if joints is None else joints
        total = 0.0
        for j in joints:
            m = self.analytic_mixture(seq_idx, j, step_ahead)
            total -= so3stats.mixture_log_pdf(m, seq.frames[frame, j])
        return total

    def to_metadata(self):
        return {
            "scenario": self.scenario,
            "fps": self.fps,
            "branch_frame": self.branch_frame,
            "noise_sigma": self.noise_sigma,
            "osc_amp": self.osc_amp,
            "osc_period": self.osc_period,
            "branch_rate": self.branch_rate,
            "branch_probs": self.branch_probs.tolist(),
            "phases": self.phases.tolist(),
            "branches": self.branches.tolist(),
            "spin_rates": self.spin_rates.tolist(),
        }

    @staticmethod
    def from_metadata(meta, skeleton, sequences):
        return SynthDataset(
            scenario=meta["scenario"],
            skeleton=skeleton,
            sequences=sequences,
            fps=meta["fps"],
            branch_frame=meta["branch_frame"],
            noise_sigma=meta["noise_sigma"],
            osc_amp=meta["osc_amp"],
            osc_period=meta["osc_period"],
            branch_rate=meta["branch_rate"],
            branch_probs=np.array(meta["branch_probs"]),
            phases=np.array(meta["phases"]),
            branches=np.array(meta["branches"], dtype=int),
            spin_rates=np.array(meta["spin_rates"]),
        )


_BRANCH_PROBS = {
    "bimodal-pendulum": np.array([0.7, 0.3]),
    "trimodal-arm": np.array([0.5, 0.3, 0.2]),
    "constant-velocity": np.array([1.0]),
}


def synth_generate(
    scenario,
    count,
    frames,
    fps,
    rng,
    branch_frame=None,
    noise_sigma=0.03,
    osc_amp=0.5,
    osc_period=25.0,
    branch_rate=0.04,
):
    """Generate a dataset of motion sequences with known generative law.

    Every joint receives iid isotropic tangent noise of noise_sigma per
    frame on its differential; elbow joints branch at branch_frame
    (default: frames // 3) with scenario-fixed probabilities.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if count < 1 or frames < 2:
        raise ValueError("count must be >= 1 and frames >= 2")
    skeleton = pendulum_skeleton()
    n = skeleton.n_joints
    if branch_frame is None:
        branch_frame = frames // 3
    probs = _BRANCH_PROBS[scenario]
    # one oscillation phase per dataset: keeps the future law conditionally
    # exact given the observed t=0 pose, so the analytic NLL is attainable
    phases = np.full(count, rng.uniform(0.0, 2.0 * np.pi))
    branches = rng.choice(len(probs), size=count, p=probs)
    spin_rates = rng.uniform(-0.03, 0.03, size=(count, n, 3))
    if scenario != "constant-velocity":
        spin_rates = np.zeros_like(spin_rates)

    proto = SynthDataset(
        scenario=scenario, skeleton=skeleton, sequences=[], fps=fps,
        branch_frame=branch_frame, noise_sigma=noise_sigma, osc_amp=osc_amp,
        osc_period=osc_period, branch_rate=branch_rate, branch_probs=probs,
        phases=phases, branches=branches, spin_rates=spin_rates,
    )

    sequences = []
    for s in range(count):
        mean_prev = np.stack(
            [proto.mean_quat(s, j, 0, branches[s]) for j in range(n)]
        )
        q = mean_prev  # frame 0 is noise-free by construction
        seq_frames = [q]
        for t in range(1, frames):
            mean_t = np.stack([proto.mean_quat(s, j, t, branches[s]) for j in range(n)])
            mean_diff = rotmath.diff_quat(mean_prev, mean_t)
            noise = rotmath.exp_so3(noise_sigma * rng.standard_normal((n, 3)))
            q = rotmath.quat_mul(q, rotmath.quat_mul(mean_diff, noise))
            seq_frames.append(q)
            mean_prev = mean_t
        sequences.append(
            MotionSequence(skeleton=skeleton, fps=fps, frames=np.stack(seq_frames))
        )
    return SynthDataset(
        scenario=scenario, skeleton=skeleton, sequences=sequences, fps=fps,
        branch_frame=branch_frame, noise_sigma=noise_sigma, osc_amp=osc_amp,
        osc_period=osc_period, branch_rate=branch_rate, branch_probs=probs,
        phases=phases, branches=branches, spin_rates=spin_rates,
    )


def save_dataset(dataset, out_dir):
    """Write skeleton, motions, and generator metadata to a directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "skeleton.txt").write_text(write_skeleton(dataset.skeleton))
    for i, seq in enumerate(dataset.sequences):
        (out_dir / f"motion_{i:05d}.txt").write_text(write_motion(seq, "skeleton.txt"))
    (out_dir / "generator.json").write_text(json.dumps(dataset.to_metadata(), indent=2))


def load_dataset(in_dir):
    skeleton = parse_skeleton((in_dir / "skeleton.txt").read_text())
    meta = json.loads((in_dir / "generator.json").read_text())
    sequences = [
        parse_motion(p.read_text(), skeleton) for p in sorted(in_dir.glob("motion_*.txt"))
    ]
    return SynthDataset.from_metadata(meta, skeleton, sequences)
