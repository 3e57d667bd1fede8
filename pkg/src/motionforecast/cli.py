"""Command-line interface.

Subcommands: synth (generate synthetic datasets), train (fit a model),
predict (emit forecasts in one of four output configurations), eval
(compute metric reports). Every run writes a JSON manifest recording the
command, seed, paths, and checkpoint hash so results can be reproduced.

Log verbosity is controlled by the MOTRON_LOG environment variable
(error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from motionforecast import __version__, evaluation, kindata, model as model_mod, training

log = logging.getLogger("motionforecast")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging():
    name = os.environ.get("MOTRON_LOG", "warn").lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        level = logging.WARNING
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        log.warning("unknown MOTRON_LOG value %r; using 'warn'", name)
    else:
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, seed=None, config_path=None,
                   inputs=(), outputs=(), checkpoint=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": str(config_path) if config_path else None,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "checkpoint_sha256": _sha256(checkpoint) if checkpoint else None,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    dataset = kindata.synth_generate(
        args.scenario, count=args.count, frames=args.frames, fps=args.fps, rng=rng
    )
    out_dir = Path(args.out)
    kindata.save_dataset(dataset, out_dir)
    outputs = ["skeleton.txt", "generator.json"] + [
        f"motion_{i:05d}.txt" for i in range(args.count)
    ]
    write_manifest(out_dir, "synth", seed=args.seed, outputs=outputs)
    log.info("wrote %d sequences to %s", args.count, out_dir)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    cfg = training.parse_train_config(Path(args.config).read_text())
    dataset = kindata.load_dataset(Path(args.data))
    skel = dataset.skeleton
    x, y = training.windows_from_dataset(dataset, cfg)
    n_val = max(1, int(round(len(x) * args.val_fraction)))
    train_xy = (x[:-n_val], y[:-n_val])
    val_xy = (x[-n_val:], y[-n_val:])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    log_path = out_dir / "train_log.csv"

    if args.resume:
        mdl = model_mod.load_checkpoint(args.resume, skeleton_classes=skel.classes)
        start_epoch = 0
        if log_path.exists():
            rows = log_path.read_text().strip().splitlines()[1:]
            if rows:
                start_epoch = int(rows[-1].split(",")[0]) + 1
        mode = "a" if log_path.exists() else "w"
    else:
        mcfg = model_mod.ModelConfig(
            classes=skel.classes,
            d_hidden=args.d_hidden,
            n_modes=args.n_modes,
            max_horizon=cfg.target_horizon,
            latent_grad_flow=cfg.latent_grad_flow,
        )
        mdl = model_mod.MotionModel(mcfg, rng=np.random.default_rng(cfg.seed))
        start_epoch = 0
        mode = "w"

    with open(log_path, mode) as fh:
        if mode == "w":
            fh.write("epoch,train_nll,val_nll,horizon,seconds\n")

        def on_epoch(row):
            epoch, train_nll, val_nll, horizon, seconds = row
            fh.write(
                f"{epoch + start_epoch},{train_nll:.6f},{val_nll:.6f},{horizon},{seconds:.3f}\n"
            )
            fh.flush()
            log.info("epoch %d train %.4f val %.4f", epoch + start_epoch, train_nll, val_nll)

        result = training.train(mdl, train_xy, val_xy, cfg, skeleton=skel, log_callback=on_epoch)

    model_mod.save_checkpoint(result.model, ckpt_path)
    write_manifest(
        out_dir, "train", seed=cfg.seed, config_path=args.config,
        inputs=[args.data], outputs=[ckpt_path.name, log_path.name],
        checkpoint=ckpt_path,
    )
    if result.diverged:
        log.error("training diverged; last finite-epoch checkpoint retained")
        return 1
    log.info("best val NLL %.4f at epoch %d", result.best_val_nll, result.best_epoch)
    return 0


# ---------------------------------------------------------------------------
# predict


def _load_history(args, skel):
    seq = kindata.parse_motion(Path(args.input).read_text(), skel)
    return kindata.states_from_frames(seq.frames), seq.fps


def cmd_predict(args):
    mdl = model_mod.load_checkpoint(args.model)
    skel = kindata.parse_skeleton(Path(args.skeleton).read_text())
    if list(skel.classes) != mdl.config.classes:
        print(
            f"error: checkpoint class map {mdl.config.classes} does not match "
            f"skeleton class map {list(skel.classes)}",
            file=sys.stderr,
        )
        return 1
    x, fps = _load_history(args, skel)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fc = mdl.predict_distribution(x, args.horizon)
    outputs = []

    if args.mode == "distribution":
        path = out_dir / "distribution.csv"
        with open(path, "w") as fh:
            fh.write("mode,weight,step,node,qw,qx,qy,qz,l00,l10,l11,l20,l21,l22\n")
            for z, w in enumerate(fc.mode_weights):
                for t in range(args.horizon):
                    for j in range(skel.n_joints):
                        q = fc.means[z, t, j]
                        chol = np.linalg.cholesky(fc.covs[z, t, j])
                        tri = [chol[0, 0], chol[1, 0], chol[1, 1], chol[2, 0], chol[2, 1], chol[2, 2]]
                        vals = [f"{v:.9g}" for v in (*q, *tri)]
                        fh.write(f"{z},{w:.9g},{t},{j}," + ",".join(vals) + "\n")
        outputs.append(path.name)
    elif args.mode == "sample":
        rng = np.random.default_rng(args.seed)
        motions = mdl.sample_motions(x, args.horizon, args.num_samples, rng, forecast=fc)
        for i, frames in enumerate(motions):
            seq = kindata.MotionSequence(skeleton=skel, fps=fps, frames=frames)
            path = out_dir / f"sample_{i:05d}.txt"
            path.write_text(kindata.write_motion(seq, args.skeleton))
            outputs.append(path.name)
    else:
        frames = (
            mdl.ml_mode_motion(x, args.horizon, forecast=fc)
            if args.mode == "ml-mode"
            else mdl.w_mean_motion(x, args.horizon, forecast=fc)
        )
        seq = kindata.MotionSequence(skeleton=skel, fps=fps, frames=frames)
        path = out_dir / f"{args.mode}.txt"
        path.write_text(kindata.write_motion(seq, args.skeleton))
        outputs.append(path.name)

    write_manifest(
        out_dir, "predict", seed=args.seed, inputs=[args.model, args.input],
        outputs=outputs, checkpoint=args.model,
    )
    return 0


# ---------------------------------------------------------------------------
# eval

_METRICS = ("kde-nll", "ade", "fde", "apd", "mmade", "mmfde", "mae-l2", "mpjpe", "bone-deform")


def _eval_query(mdl, skel, x, horizon, num_samples, seed):
    rng = np.random.default_rng(seed)
    motions = mdl.sample_motions(x, horizon, num_samples, rng)
    positions = kindata.forward_kinematics(skel, motions)
    return motions, positions


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in _METRICS:
            print(f"error: unknown metric {m!r}; choose from {', '.join(_METRICS)}",
                  file=sys.stderr)
            return 1
    mdl = model_mod.load_checkpoint(args.model)
    dataset = kindata.load_dataset(Path(args.data))
    skel = dataset.skeleton
    horizons = sorted(int(h) for h in args.horizons.split(","))
    horizon = horizons[-1]
    fps = dataset.fps
    t0 = dataset.branch_frame
    history = min(args.history, t0)

    queries = []
    for seq in dataset.sequences:
        if seq.n_frames < t0 + horizon + 1:
            print(f"error: horizon {horizon} exceeds available future frames", file=sys.stderr)
            return 1
        x = kindata.states_from_frames(seq.frames[t0 - history : t0 + 1])
        truth = seq.frames[t0 + 1 : t0 + 1 + horizon]
        queries.append((x, truth))

    def run_query(i):
        x, _ = queries[i]
        return _eval_query(mdl, skel, x, horizon, args.num_samples, args.seed + i)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(run_query, range(len(queries))))
    else:
        results = [run_query(i) for i in range(len(queries))]

    truth_quats = np.stack([t for _, t in queries])
    truth_pos = kindata.forward_kinematics(skel, truth_quats)
    horizons_ms = [int(round(1000.0 * h / fps)) for h in horizons]
    h_idx = [h - 1 for h in horizons]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []

    def add_report(name, per_step_values, **kw):
        reports.append(
            evaluation.MetricReport(
                name, horizons_ms, [float(per_step_values[i]) for i in h_idx],
                sample_count=args.num_samples, **kw,
            )
        )

    if "kde-nll" in metrics:
        curves = [
            evaluation.kde_nll(pos, truth_pos[i])[0] for i, (_, pos) in enumerate(results)
        ]
        per_step = np.mean(curves, axis=0)
        add_report("kde_nll", per_step, clip=20.0)
        evaluation.write_line_chart_svg(
            out_dir / "kde_nll.svg",
            [("KDE-NLL", np.arange(1, horizon + 1) * 1000.0 / fps, per_step)],
            title="NLL over horizon", x_label="horizon (ms)", y_label="NLL (nats)",
        )

    if "ade" in metrics or "fde" in metrics:
        ades = np.empty((len(results), len(horizons)))
        fdes = np.empty((len(results), len(horizons)))
        for i, (_, pos) in enumerate(results):
            for k, h in enumerate(horizons):
                ades[i, k], fdes[i, k] = evaluation.ade_fde_best_of_n(
                    pos[:, :h], truth_pos[i, :h]
                )
        if "ade" in metrics:
            reports.append(
                evaluation.MetricReport("ade", horizons_ms, list(ades.mean(axis=0)),
                                        sample_count=args.num_samples)
            )
        if "fde" in metrics:
            reports.append(
                evaluation.MetricReport("fde", horizons_ms, list(fdes.mean(axis=0)),
                                        sample_count=args.num_samples)
            )

    if "apd" in metrics:
        vals = [
            [evaluation.apd(pos[:, :h]) for h in horizons] for _, pos in results
        ]
        reports.append(
            evaluation.MetricReport("apd", horizons_ms, list(np.mean(vals, axis=0)),
                                    sample_count=args.num_samples)
        )

    if "mmade" in metrics or "mmfde" in metrics:
        start_pos = kindata.forward_kinematics(
            skel, np.stack([x[-1, :, :4] for x, _ in queries])
        )
        thresholds = [float(v) for v in args.mm_thresholds.split(",")]
        sample_pos = [pos for _, pos in results]
        mm_curves = {"mmade": [], "mmfde": []}
        for thr in thresholds:
            groups = evaluation.mm_group(start_pos, thr)
            mmade, mmfde = evaluation.mmade_mmfde(sample_pos, truth_pos, groups)
            mm_curves["mmade"].append(float(mmade.mean()))
            mm_curves["mmfde"].append(float(mmfde.mean()))
        for name in ("mmade", "mmfde"):
            if name in metrics:
                reports.append(
                    evaluation.MetricReport(
                        name, [int(1000 * t) for t in thresholds], mm_curves[name],
                        sample_count=args.num_samples,
                        extra={"x_axis": "threshold_mm"},
                    )
                )
        evaluation.write_line_chart_svg(
            out_dir / "mm_metrics.svg",
            [(n, thresholds, mm_curves[n]) for n in ("mmade", "mmfde")],
            title="MM metrics over grouping threshold",
            x_label="threshold (m)", y_label="error (m)",
        )

    if "mae-l2" in metrics or "mpjpe" in metrics or "bone-deform" in metrics:
        preds = np.stack([mdl.ml_mode_motion(x, horizon) for x, _ in queries])
        if args.baseline:
            base = np.stack(
                [evaluation.zero_velocity_baseline(x, horizon) for x, _ in queries]
            )
        if "mae-l2" in metrics:
            add_report("mae_l2", evaluation.mae_l2(preds, truth_quats))
            if args.baseline:
                add_report("mae_l2_zero_velocity", evaluation.mae_l2(base, truth_quats))
        if "mpjpe" in metrics:
            add_report("mpjpe", evaluation.mpjpe(preds, truth_quats, skel).mean(axis=0))
            if args.baseline:
                add_report(
                    "mpjpe_zero_velocity",
                    evaluation.mpjpe(base, truth_quats, skel).mean(axis=0),
                )
        if "bone-deform" in metrics:
            deform_max = np.zeros(horizon)
            for _, pos in results:
                for s in range(pos.shape[0]):
                    _, mx = evaluation.bone_deformation_audit(pos[s], skel)
                    deform_max = np.maximum(deform_max, mx)
            add_report("bone_deformation_max", deform_max)

    outputs = []
    for r in reports:
        path = out_dir / f"{r.name}.csv"
        evaluation.write_report_csv(path, r)
        outputs.append(path.name)
    evaluation.write_report_json(out_dir / "metrics.json", reports)
    outputs.append("metrics.json")
    write_manifest(
        out_dir, "eval", seed=args.seed, inputs=[args.model, args.data],
        outputs=outputs, checkpoint=args.model,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="motionforecast",
        description="Probabilistic human-motion forecasting on synthetic skeleton data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenario", required=True, choices=kindata.SCENARIOS)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--d-hidden", type=int, default=32)
    p.add_argument("--n-modes", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast from a history motion file")
    p.add_argument("--model", required=True)
    p.add_argument("--skeleton", required=True)
    p.add_argument("--input", required=True, help="history motion file")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--mode", choices=("distribution", "sample", "ml-mode", "w-mean"),
                   default="distribution")
    p.add_argument("--num-samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a model on a dataset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="kde-nll,ade,fde,apd")
    p.add_argument("--num-samples", type=int, default=50)
    p.add_argument("--horizons", default="5,10,25", help="comma-separated step counts")
    p.add_argument("--mm-thresholds", default="0.1,0.2,0.5")
    p.add_argument("--history", type=int, default=4)
    p.add_argument("--baseline", action="store_true",
                   help="include the zero-velocity baseline rows")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
