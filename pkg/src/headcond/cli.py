"""Command-line entry point: ``headcond <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error (message on stderr).
All randomness comes from ``--seed``; identical inputs give identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _vec3(text):
    try:
        v = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three numbers, got {text!r}") from None
    if len(v) != 3:
        raise argparse.ArgumentTypeError(f"expected three numbers, got {text!r}")
    return v


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_asset_gen(args):
    from .head_model import make_desk_asset, save_asset

    asset = make_desk_asset(args.vertices, args.landmarks, args.shape, args.expr, seed=args.seed)
    save_asset(asset, args.out)


def _camera(args):
    import numpy as np

    from .head_model import Camera

    return Camera(args.camera_scale, np.array([args.camera_offset, args.camera_offset]))


def cmd_synth(args):
    from .head_model import load_asset
    from .synth_data import LeakageConfig, TrajectoryConfig, build_dataset, save_dataset

    asset = load_asset(args.asset)
    traj = TrajectoryConfig(
        n_frames=args.frames,
        fps=args.fps,
        pose_amplitude=args.pose_amplitude,
        expr_amplitude=args.expr_amplitude,
        seed=args.seed,
    )
    leak = LeakageConfig(yaw_threshold=args.leak_threshold, gain=args.leak_gain, seed=args.seed)
    save_dataset(build_dataset(asset, args.n_seq, traj, leak, _camera(args), seed=args.seed), args.out)


def cmd_fit(args):
    from . import condition
    from .files import load_landmarks
    from .fitting import FitConfig, fit_sequence
    from .head_model import load_asset

    asset = load_asset(args.asset)
    frames, fps = load_landmarks(args.landmarks)
    results, seq = fit_sequence(asset, frames, FitConfig(max_iters=args.max_iters), fps, not args.no_warm_start)
    condition.save(seq, args.out)
    if args.report:
        _write_json(
            args.report,
            {
                "residual_rms": [r.residual_rms for r in results],
                "converged": [r.converged for r in results],
                "camera": [{"scale": r.camera.scale, "translation": list(map(float, r.camera.translation))} for r in results],
            },
        )


def _load_angles(path):
    import numpy as np

    a = np.loadtxt(path, delimiter=None if "," not in Path(path).read_text() else ",", ndmin=2)
    if a.shape[1] != 3:
        raise ValueError(f"{path}: expected three angles per line")
    return a


def cmd_edit(args):
    from . import condition

    seq = condition.load(args.input)
    if args.fix_pose is not None:
        seq = condition.apply_pose_edit(seq, condition.PoseEdit("fixed", args.fix_pose))
    if args.overlay:
        seq = condition.apply_pose_edit(seq, condition.PoseEdit("overlay", _load_angles(args.overlay)))
    if args.absolute:
        seq = condition.apply_pose_edit(seq, condition.PoseEdit("absolute", _load_angles(args.absolute)))
    if args.swap_expression:
        src = "idle" if args.swap_expression == "idle" else condition.load(args.swap_expression)
        seq = condition.swap_expression(seq, src)
    if args.resample:
        seq = condition.resample(seq, args.resample)
    condition.save(seq, args.out)


def cmd_a2f_train(args):
    from . import condition
    from .audio2flame import A2FConfig, load_audio, save_a2f, synth_audio, train_a2f
    from .synth_data import load_dataset

    pairs = []
    if args.dataset:
        for i, s in enumerate(load_dataset(args.dataset)):
            pairs.append((synth_audio(s.clean_conditions, seed=args.seed * 100003 + i), s.clean_conditions))
    if len(args.audio) != len(args.conditions):
        raise UsageError("--audio and --conditions must be given the same number of times")
    for a, c in zip(args.audio, args.conditions):
        pairs.append((load_audio(a), condition.load(c)))
    if not pairs:
        raise UsageError("give --dataset or --audio/--conditions pairs")
    save_a2f(train_a2f(pairs, A2FConfig(args.context, args.ridge)), args.out)


def cmd_a2f_infer(args):
    from . import condition
    from .audio2flame import infer_a2f, load_a2f, load_audio

    condition.save(infer_a2f(load_a2f(args.params), load_audio(args.audio)), args.out)


def cmd_synth_audio(args):
    from . import condition
    from .audio2flame import save_audio, synth_audio

    save_audio(synth_audio(condition.load(args.conditions), seed=args.seed, dim=args.dim), args.out)


def _new_params(dataset, seed):
    from . import diffusion

    p = diffusion.init_params(diffusion.DenoiserConfig(), seed=seed)
    mean = diffusion.TrainingSet.from_samples(dataset, p).targets.reshape(-1, p.config.data_dim).mean(axis=0)
    return diffusion.init_params(diffusion.DenoiserConfig(), seed=seed, data_mean=mean)


def cmd_train(args):
    from . import diffusion, pft
    from .synth_data import load_dataset

    dataset = load_dataset(args.dataset)
    params = diffusion.load_checkpoint(args.init) if args.init else _new_params(dataset, args.seed)
    overrides = {"seed": args.seed}
    for key in ("steps", "lr", "batch_size", "clip"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    stage = pft.stage_defaults(args.stage, stage2_motion=args.stage2_motion, **overrides)
    schedule = diffusion.make_schedule(params.config.n_steps)
    params, report = pft.run_pipeline(dataset, [stage], params, schedule)
    diffusion.save_checkpoint(params, args.out, extra={"stage": args.stage})
    if args.log:
        diffusion.save_log(report.log, args.log)
    s = report.stages[0]
    print(f"{s.stage}: loss {s.initial_loss:.6g} -> {s.final_loss:.6g} in {s.wall_clock:.1f}s", file=sys.stderr)


def cmd_sample(args):
    import numpy as np

    from . import condition, diffusion
    from .files import load_landmarks, save_landmarks

    params = diffusion.load_checkpoint(args.checkpoint)
    ref, _ = load_landmarks(args.ref)
    seq = condition.load(args.conditions)
    frames = diffusion.sample(params, ref[0], seq, diffusion.make_schedule(params.config.n_steps), seed=args.seed)
    save_landmarks(args.out, np.array(frames), seq.fps)


def cmd_eval(args):
    from . import condition, metrics
    from .files import load_landmarks

    if args.metric == "rmse":
        report = {"landmark_rmse": metrics.landmark_rmse(load_landmarks(args.pred)[0], load_landmarks(args.target)[0])}
    elif args.metric == "pose":
        from .head_model import load_asset

        errs = metrics.pose_errors(load_landmarks(args.pred)[0], load_asset(args.asset), condition.load(args.conditions))
        report = {"pose_error": float(errs.mean()), "per_frame": [float(e) for e in errs]}
    elif args.metric == "jaw-sync":
        from .audio2flame import load_audio

        report = {"jaw_sync": metrics.jaw_sync(condition.load(args.conditions), load_audio(args.audio))}
    else:
        from . import diffusion
        from .head_model import load_asset
        from .synth_data import load_dataset

        params = diffusion.load_checkpoint(args.checkpoint)
        items = load_dataset(args.dataset)[: args.n_test]
        rep = metrics.decoupling_score(
            params, load_asset(args.asset), items, diffusion.make_schedule(params.config.n_steps), seed=args.seed
        )
        report = rep.as_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pipeline(args):
    from .pipeline import run_config

    run_config(Path(args.config), Path(args.out), seed=args.seed)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headcond", description="3D-head-conditioned landmark diffusion toolkit")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("asset-gen", help="generate a procedural head asset")
    s.add_argument("--out", required=True)
    s.add_argument("--vertices", type=int, default=300)
    s.add_argument("--landmarks", type=int, default=68)
    s.add_argument("--shape", type=int, default=10, help="identity basis size")
    s.add_argument("--expr", type=int, default=20, help="expression basis size")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_asset_gen)

    s = sub.add_parser("synth", help="synthesize a landmark dataset with tracker leakage")
    s.add_argument("--asset", required=True)
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--n-seq", type=int, default=40)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--pose-amplitude", type=float, default=0.35)
    s.add_argument("--expr-amplitude", type=float, default=0.5)
    s.add_argument("--leak-gain", type=float, default=0.5)
    s.add_argument("--leak-threshold", type=float, default=0.35)
    s.add_argument("--camera-scale", type=float, default=100.0)
    s.add_argument("--camera-offset", type=float, default=256.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit head coefficients to a landmark sequence")
    s.add_argument("--asset", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--out", required=True, help="condition file (.json text or .bin)")
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--no-warm-start", action="store_true")
    s.add_argument("--report", help="optional per-frame fit report (JSON)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("edit", help="edit a condition sequence")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fix-pose", type=_vec3, help="constant global rotation x,y,z (radians)")
    s.add_argument("--overlay", help="text file, one x y z rotation per frame, composed on the left")
    s.add_argument("--absolute", help="text file, one x y z rotation per frame, replacing the pose")
    s.add_argument("--swap-expression", help="'idle' or a condition file to take expressions from")
    s.add_argument("--resample", type=float, help="target fps")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("synth-audio", help="synthetic audio features for a condition sequence")
    s.add_argument("--conditions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_audio)

    s = sub.add_parser("a2f-train", help="fit the audio-to-condition regressor")
    s.add_argument("--dataset", help="dataset directory; audio is synthesized from its clean conditions")
    s.add_argument("--audio", action="append", default=[])
    s.add_argument("--conditions", action="append", default=[])
    s.add_argument("--out", required=True)
    s.add_argument("--context", type=int, default=4)
    s.add_argument("--ridge", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_a2f_train)

    s = sub.add_parser("a2f-infer", help="audio features -> condition sequence")
    s.add_argument("--params", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_a2f_infer)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--stage", default="joint_baseline", choices=("motion", "expression", "temporal", "joint_baseline"))
    s.add_argument("--init", help="checkpoint to resume from")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--clip", type=float)
    s.add_argument("--stage2-motion", default="fed", choices=("fed", "withheld"))
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate landmark frames from conditions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ref", required=True, help="landmark file; its first frame is the reference")
    s.add_argument("--conditions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="compute a metric")
    s.add_argument("--metric", required=True, choices=("rmse", "pose", "jaw-sync", "decoupling"))
    s.add_argument("--pred", help="landmark file (rmse, pose)")
    s.add_argument("--target", help="landmark file (rmse)")
    s.add_argument("--asset", help="asset file (pose, decoupling)")
    s.add_argument("--conditions", help="condition file (pose, jaw-sync)")
    s.add_argument("--audio", help="audio-feature file (jaw-sync)")
    s.add_argument("--checkpoint", help="denoiser checkpoint (decoupling)")
    s.add_argument("--dataset", help="dataset directory (decoupling)")
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="report file; stdout when omitted")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", help="synth -> staged training -> sample -> eval from one config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="pipeline_out")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_pipeline)
    return p


_REQUIRED = {
    "rmse": ("pred", "target"),
    "pose": ("pred", "asset", "conditions"),
    "jaw-sync": ("conditions", "audio"),
    "decoupling": ("checkpoint", "asset", "dataset"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval":
        missing = [f"--{k}" for k in _REQUIRED[args.metric] if getattr(args, k) is None]
        if missing:
            parser.error(f"eval --metric {args.metric} needs {', '.join(missing)}")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as e:
        print(f"headcond {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"headcond {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
