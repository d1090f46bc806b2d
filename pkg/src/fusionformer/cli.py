"""Command-line interface: synth, train, eval, infer, gradcheck, export-attention."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from . import tensor as tn
from .data import SKELETONS, Dataset, PoseClip, load_pose_file, save_pose_file, synth_dataset, window_clips
from .gradcheck import TOY_CONFIG, check_model, check_ops, worst
from .metrics import per_joint_error
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor
from .train import (Checkpoint, EpochLog, TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint,
                    train)

PROG = "fusionformer"
SEED_ENV = "FUSIONFORMER_SEED"
LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_mpjpe")


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: str
    val_data: str | None
    out_dir: str
    stride: int = 1
    checkpoint_every: int = 5

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data,
                "val_data": self.val_data, "out_dir": self.out_dir, "stride": self.stride,
                "checkpoint_every": self.checkpoint_every}


# -- helpers -----------------------------------------------------------------

def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return fallback
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None


def read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or set(doc) - {"model", "train"}:
        raise CliError(f"{path}: expected an object with optional 'model' and 'train' sections")
    return doc


def model_config_for(section: dict, n_joints: int) -> ModelConfig:
    section = dict(section)
    if section.setdefault("joints", n_joints) != n_joints:
        raise CliError(f"config declares {section['joints']} joints but the data has {n_joints}")
    return ModelConfig.from_dict(section)


def load_windows(path: str, frames: int, stride: int) -> Dataset:
    clips = load_pose_file(path)
    if not clips:
        raise CliError(f"{path}: no clips")
    windows = []
    for i, clip in enumerate(clips):
        if clip.n_frames < frames:
            raise CliError(f"{path}: clip {i} has {clip.n_frames} frames, model needs {frames}")
        windows += window_clips(clip, frames, stride)
    return Dataset(windows)


def _write_report(out_dir: Path, report, dataset: Dataset, centers: np.ndarray, mm_per_unit: float):
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.json").write_text(report.to_json())
    gts = np.stack([c.frames_3d[c.center] for c in dataset.clips])
    errors = per_joint_error(centers, gts, dataset.skeleton.root) * mm_per_unit
    plotting.joint_errors(errors, dataset.skeleton.joint_names, out_dir / "figures" / "joint_errors.png")


def cte_map(params, config: ModelConfig, clip: PoseClip, layer: int, head: int) -> np.ndarray:
    if not config.lim_enabled:
        raise CliError("model has no cross-trajectory encoder (LIM disabled)")
    if not -config.cte_layers <= layer < config.cte_layers:
        raise CliError(f"layer {layer} out of range for {config.cte_layers} CTE layers")
    if not 0 <= head < config.cte_heads:
        raise CliError(f"head {head} out of range for {config.cte_heads} CTE heads")
    with tn.no_grad():
        _, _, trace = model_forward(Tensor(clip.frames_2d), params, config)
    return trace.attention["cte"][layer][0, head]


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.frames < 1 or args.frames % 2 == 0:
        raise CliError(f"--frames must be a positive odd number, got {args.frames}")
    if args.clips < 1:
        raise CliError("--clips must be >= 1")
    ds = synth_dataset(resolve_seed(args.seed), args.clips, args.frames, SKELETONS[args.skeleton],
                       noise=args.noise, fps=args.fps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pose_file(args.out, ds.clips)
    print(f"wrote {len(ds)} clips of {args.frames} frames to {args.out}")
    return 0


def build_run_config(args) -> RunConfig:
    doc = read_config_file(args.config)
    train_section = dict(doc.get("train", {}))
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
                 "max_steps": args.max_steps, "refine_source": args.refine_source}
    train_section.update({k: v for k, v in overrides.items() if v is not None})
    if args.flip_augment:
        train_section["flip_augment"] = True
    train_section["seed"] = resolve_seed(args.seed, train_section.get("seed", 0))
    clips = load_pose_file(args.data)
    if not clips:
        raise CliError(f"{args.data}: no clips")
    model = model_config_for(doc.get("model", {}), clips[0].skeleton.n_joints)
    return RunConfig(model, TrainConfig.from_dict(train_section), args.data, args.val_data,
                     args.out_dir, args.stride, args.checkpoint_every)


def cmd_train(args) -> int:
    run = build_run_config(args)
    out = Path(run.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    data = load_windows(run.data, run.model.frames, run.stride)
    val = load_windows(run.val_data, run.model.frames, run.stride) if run.val_data else None
    if val is not None and val.skeleton != data.skeleton:
        raise CliError("validation data uses a different skeleton")
    meta = {"joint_names": list(data.skeleton.joint_names), "root": data.skeleton.root,
            "train": run.train.to_dict()}

    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.config != run.model:
            raise CliError(f"{args.resume}: model config differs from this run")
        params, state, start = ck.params, ck.state, ck.epoch
    else:
        params, state, start = init_params(run.model, run.train.seed), None, 0

    log_path = out / "loss_log.csv"
    append = bool(args.resume) and log_path.exists()
    with open(log_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(LOG_COLUMNS)

        def on_epoch(epoch: int, p, st, entry: EpochLog):
            writer.writerow([entry.epoch, repr(entry.lr), repr(entry.train_loss), repr(entry.val_mpjpe)])
            fh.flush()
            if (epoch + 1) % run.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt",
                                Checkpoint(run.model, p, st, epoch + 1, meta))

        params, history, state = train(params, run.model, data, run.train, val=val, state=state,
                                       start_epoch=start, on_epoch=on_epoch)
    last = history[-1].epoch + 1 if history else start
    save_checkpoint(out / "final.ckpt", Checkpoint(run.model, params, state, last, meta))

    rows = list(csv.DictReader(log_path.open()))
    if rows:
        plotting.training_curves([int(r["epoch"]) for r in rows], [float(r["train_loss"]) for r in rows],
                                 [float(r["val_mpjpe"]) for r in rows], [float(r["lr"]) for r in rows],
                                 out / "figures" / "training_curves.png")
    target = val if val is not None else data
    report = evaluate(params, run.model, target, mm_per_unit=args.mm_per_unit)
    _, centers = predict(params, run.model, target.clips)
    _write_report(out, report, target, centers, args.mm_per_unit)
    if run.model.lim_enabled:
        weights = cte_map(params, run.model, target.clips[0], -1, 0)
        plotting.attention_heatmap(weights, target.skeleton.joint_names, out / "figures" / "cte_attention.png",
                                   "CTE last layer, head 0")
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    data = load_windows(args.data, ck.config.frames, args.stride)
    if not data.has_3d():
        raise CliError(f"{args.data}: evaluation needs frames_3d for every clip")
    report = evaluate(ck.params, ck.config, data, flip_ensemble=args.flip_ensemble,
                      mm_per_unit=args.mm_per_unit)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, centers = predict(ck.params, ck.config, data.clips, flip_ensemble=args.flip_ensemble)
    _write_report(out, report, data, centers, args.mm_per_unit)
    sys.stdout.write(report.to_text())
    return 0


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    data = load_windows(args.data, ck.config.frames, args.stride)
    seqs, centers = predict(ck.params, ck.config, data.clips, flip_ensemble=args.flip_ensemble)
    c = ck.config.center
    seqs[:, c] = centers  # the refined pose is the final answer for the center frame
    out = [PoseClip(w.frames_2d, w.skeleton, s, w.fps) for w, s in zip(data.clips, seqs)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pose_file(args.out, out)
    print(f"wrote {len(out)} predicted windows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.tolerance < 0:
        raise CliError("--tolerance must be >= 0")
    doc = read_config_file(args.config)
    config = ModelConfig.from_dict({**TOY_CONFIG.to_dict(), **doc.get("model", {})})
    seed = resolve_seed(args.seed)
    results = check_ops(seed)
    if not args.ops_only:
        results += check_model(config, seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("kind", "name", "rel_error", "status"))
    for r in results:
        writer.writerow((r.kind, r.name, repr(r.error), "PASS" if r.error < args.tolerance else "FAIL"))
    w = worst(results)
    ok = w.error < args.tolerance
    print(f"# worst {w.kind} {w.name} rel_error={w.error!r} tolerance={args.tolerance!r} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_export_attention(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    data = load_windows(args.data, ck.config.frames, args.stride)
    if not 0 <= args.clip < len(data):
        raise CliError(f"--clip {args.clip} out of range for {len(data)} windows")
    weights = cte_map(ck.params, ck.config, data.clips[args.clip], args.layer, args.head)
    names = data.skeleton.joint_names
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query"] + list(names))
        for name, row in zip(names, weights):
            writer.writerow([name] + [repr(float(v)) for v in row])
    figure = Path(args.figure) if args.figure else out.with_suffix(".png")
    plotting.attention_heatmap(weights, names, figure, f"CTE layer {args.layer}, head {args.head}")
    print(f"wrote {len(names)}x{len(names)} attention map to {out} and {figure}")
    return 0


# -- parser ------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        return action.help if action.required else super()._get_help_string(action)


def _seed_arg(p, config_fallback=False):
    chain = f"${SEED_ENV}, then the config file, then 0" if config_fallback else f"${SEED_ENV}, then 0"
    p.add_argument("--seed", type=int, default=None, help=f"random seed; falls back to {chain}")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog=PROG, description="2D-to-3D pose lifting with dual-branch "
                                     "transformers, built on a small numpy autodiff core.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic pose file", formatter_class=fmt)
    _seed_arg(p)
    p.add_argument("--clips", type=int, default=16, help="number of clips")
    p.add_argument("--frames", type=int, default=9, help="frames per clip (odd)")
    p.add_argument("--skeleton", choices=sorted(SKELETONS), default="simple9", help="skeleton preset")
    p.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise added to the 2D input")
    p.add_argument("--fps", type=float, default=50.0, help="frame rate of the generated motion")
    p.add_argument("--out", required=True, help="output pose file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a run directory", formatter_class=fmt)
    p.add_argument("--config", default=None, help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--data", required=True, help="training pose file (needs frames_3d)")
    p.add_argument("--val-data", default=None, help="validation pose file; default: the training data")
    p.add_argument("--out-dir", required=True, help="run directory")
    p.add_argument("--refine-source", choices=("input", "gt"), default=None,
                   help="2D reference for refinement during training (config file value, else 'input')")
    p.add_argument("--flip-augment", action="store_true", help="add mirrored copies of every clip")
    _seed_arg(p, config_fallback=True)
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.add_argument("--batch-size", type=int, default=None, help="override the batch size")
    p.add_argument("--lr", type=float, default=None, help="override the base learning rate")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--stride", type=int, default=1, help="window stride for clips longer than the model")
    p.add_argument("--checkpoint-every", type=int, default=5, help="epochs between milestone checkpoints")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--mm-per-unit", type=float, default=1000.0, help="millimetres per scene unit for PCK/AUC")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labelled data", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="pose file with frames_3d")
    p.add_argument("--flip-ensemble", action="store_true", help="average with the mirrored-input prediction")
    p.add_argument("--stride", type=int, default=1, help="window stride")
    p.add_argument("--out-dir", default="eval", help="directory for report.txt, report.json and figures")
    p.add_argument("--mm-per-unit", type=float, default=1000.0, help="millimetres per scene unit for PCK/AUC")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict 3D poses for every window", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="input pose file (frames_3d optional)")
    p.add_argument("--out", required=True, help="output pose file with predicted frames_3d")
    p.add_argument("--flip-ensemble", action="store_true", help="average with the mirrored-input prediction")
    p.add_argument("--stride", type=int, default=1, help="window stride")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences", formatter_class=fmt)
    p.add_argument("--config", default=None, help="JSON file whose 'model' section overrides the toy config")
    p.add_argument("--tolerance", type=float, default=1e-4, help="pass if every relative error is below this")
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    _seed_arg(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="dump one CTE attention map as CSV and heatmap",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="pose file")
    p.add_argument("--clip", type=int, default=0, help="window index")
    p.add_argument("--layer", type=int, default=0, help="CTE layer (negative counts from the end)")
    p.add_argument("--head", type=int, default=0, help="CTE head")
    p.add_argument("--stride", type=int, default=1, help="window stride")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--figure", default=None, help="heatmap PNG; default: next to the CSV")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{PROG} {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
