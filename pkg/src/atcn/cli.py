"""Command-line entry point: ``atcn {synth,train,eval,infer,selfcheck}``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Every file the commands write goes through a temp file and a rename.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import FORMAT_VERSION, load_checkpoint
from .dataio import (
    JPSEQ_VERSION,
    Camera,
    JointSequence,
    Skeleton,
    atomic_write_text,
    load_camera,
    load_sequence,
    save_camera,
    save_sequence,
    synth_generate,
    window_array,
)
from .errors import (
    AtcnError,
    CheckpointError,
    ConfigError,
    InputError,
    ParseError,
    TrainingDiverged,
)
from .metrics import root_center, trace_errors
from .model import ModelConfig, build
from .selfcheck import run_checks
from .train import TrainConfig, build_dataset, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flag combination detected after argparse succeeded."""


def _read_json(path) -> object:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def _camera_or_none(path) -> Camera | None:
    return load_camera(path) if path else None


def _mirror_pairs(J: int):
    return Skeleton.h36m().mirror_pairs if J == 17 else None


def _ground_truth(seq3d: JointSequence, camera: Camera | None) -> np.ndarray:
    """Root-relative ground truth, moved into the camera frame when calibrated."""
    pts = seq3d.frames if camera is None else camera.world_to_camera(seq3d.frames)
    return root_center(pts)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    seq3d, camera, seq2d = synth_generate(args.seed, args.frames, args.joints)
    prefix = Path(args.out_prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "3d": f"{prefix}.3d.jpseq",
        "2d": f"{prefix}.2d.jpseq",
        "camera": f"{prefix}.camera.json",
    }
    save_sequence(seq3d, paths["3d"])
    save_sequence(seq2d, paths["2d"])
    save_camera(camera, paths["camera"])
    print(json.dumps(paths, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg = ModelConfig.from_dict(_read_json(args.model_config))
    train_cfg = TrainConfig.from_dict(_read_json(args.train_config))
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    camera = _camera_or_none(args.camera)
    seq2d, seq3d = load_sequence(args.data2d), load_sequence(args.data3d)
    if (args.val2d is None) != (args.val3d is None):
        raise UsageError("--val2d and --val3d go together")

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        model = resume["model"]
        if model.config.to_dict() != model_cfg.to_dict():
            raise ConfigError("--model-config differs from the configuration stored in the resume checkpoint")
    else:
        model = build(model_cfg)

    pairs = _mirror_pairs(seq2d.J)
    train_set = build_dataset(seq2d, seq3d, model.n, model_cfg.causal, camera, pairs)
    val_set = None
    if args.val2d:
        val_set = build_dataset(load_sequence(args.val2d), load_sequence(args.val3d), model.n, model_cfg.causal, camera, pairs)

    result = train_loop(model, train_set, train_cfg, out_dir=args.out_dir, val_set=val_set, resume=resume)
    last = result.curve[-1] if result.curve else None
    summary = {
        "checkpoint": str(result.checkpoint_path),
        "curve": str(Path(args.out_dir) / "curve.csv"),
        "epochs": result.epochs_done,
        "final_train_loss_mm": last["train_loss_mm"] if last else None,
        "final_val_mpjpe_mm": last["val_mpjpe_mm"] if last else None,
        "behind_camera_joints": result.behind_camera,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _predict_sequence(model, seq2d: JointSequence) -> np.ndarray:
    if seq2d.D != 2 or seq2d.J != model.config.joints:
        raise InputError(f"model expects {model.config.joints} 2-D joints, file has J={seq2d.J} D={seq2d.D}")
    return model.predict(window_array(seq2d.frames, model.n, model.config.causal))


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.pred is None):
        raise UsageError("give exactly one of --checkpoint or --pred")
    camera = _camera_or_none(args.camera)
    gt = _ground_truth(load_sequence(args.data3d), camera)
    if args.checkpoint:
        if args.data2d is None:
            raise UsageError("--checkpoint needs --data2d")
        pred = _predict_sequence(load_checkpoint(args.checkpoint)["model"], load_sequence(args.data2d))
    else:
        pred = load_sequence(args.pred).frames
    if pred.shape != gt.shape:
        raise InputError(f"predictions {pred.shape} and ground truth {gt.shape} differ in shape")
    report = trace_errors(pred, gt, args.protocol)
    if args.report:
        atomic_write_text(args.report, report.to_json())
    if args.trace:
        atomic_write_text(args.trace, report.trace_csv())
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)["model"]
    seq2d = load_sequence(args.data2d)
    start = time.perf_counter()
    if args.causal_stream:
        if not model.config.causal:
            raise ConfigError("--causal-stream needs a checkpoint trained with causal=true")
        if seq2d.J != model.config.joints or seq2d.D != 2:
            raise InputError(f"model expects {model.config.joints} 2-D joints, file has J={seq2d.J} D={seq2d.D}")
        out = np.empty((seq2d.F, model.config.joints, 3))
        for t in range(seq2d.F):
            # only frames up to t are visible when frame t is emitted
            window = window_array(seq2d.frames[: t + 1], model.n, causal=True)[-1]
            out[t] = model.causal_forward(window)
    else:
        out = _predict_sequence(model, seq2d)
    seconds = time.perf_counter() - start
    save_sequence(JointSequence(out, seq2d.skeleton), args.out)
    fps = seq2d.F / seconds if seconds > 0 else float("inf")
    print(json.dumps({"out": str(args.out), "frames": seq2d.F, "fps": round(fps, 1)}, indent=2))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    data = None
    given = [args.data2d, args.data3d, args.camera]
    if any(given):
        if not all(given):
            raise UsageError("projection check needs --data2d, --data3d and --camera")
        data = (load_sequence(args.data2d), load_sequence(args.data3d), load_camera(args.camera))
    results = run_checks(args.level, data, report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atcn", description="Attention TCN 2-D to 3-D pose lifting.")
    parser.add_argument("--version", action="version", version=f"atcn {__version__} ({JPSEQ_VERSION}, {FORMAT_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic 3-D/2-D sequence pair and its camera")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--out-prefix", required=True, help="writes PREFIX.3d.jpseq, PREFIX.2d.jpseq, PREFIX.camera.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint.atcn and curve.csv")
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--data2d", required=True)
    p.add_argument("--data3d", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--camera", help="camera JSON; moves 3-D targets into the camera frame")
    p.add_argument("--val2d")
    p.add_argument("--val3d")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="overrides the train config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions under protocol 1, 2 or n")
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="root-relative 3-D predictions (jpseq) instead of a checkpoint")
    p.add_argument("--data2d")
    p.add_argument("--data3d", required=True)
    p.add_argument("--camera")
    p.add_argument("--protocol", choices=["1", "2", "n", "all"], default="all")
    p.add_argument("--report", help="JSON summary output")
    p.add_argument("--trace", help="per-frame, per-joint CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="lift a 2-D sequence to root-relative 3-D")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data2d", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--causal-stream", action="store_true", help="emit frame by frame from past frames only")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selfcheck", help="run built-in health checks")
    p.add_argument("--level", choices=["fast", "full"], default="fast")
    p.add_argument("--data2d")
    p.add_argument("--data3d")
    p.add_argument("--camera")
    p.set_defaults(func=cmd_selfcheck)
    return parser


CONFIG_ERRORS = (ConfigError, InputError, ParseError, CheckpointError, FileNotFoundError, IsADirectoryError, UsageError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"atcn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        print(f"atcn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"atcn {args.command}: training diverged at {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AtcnError, OSError, FloatingPointError) as exc:
        print(f"atcn {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
