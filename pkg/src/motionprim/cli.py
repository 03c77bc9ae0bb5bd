"""Command line entry point: ``motionprim <subcommand> ...``.

Configuration files are JSON. Values from ``--config`` are read first and
explicit command-line flags override them.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
line ``error: <category>: <message>`` on stderr.
"""

import argparse
import json
import logging
import os
import random
import shlex
import sys
from pathlib import Path

import numpy as np
import torch

from .body import KinematicBody, default_skeleton
from .completion import (
    CompletionConfig, InitEncoder, InitEncoderConfig, InitTrainConfig, complete, downsample,
    surface_cloud_sequence, train_init_encoder,
)
from .errors import MotionPrimError, UntrainedInitEncoder
from .evaluation import ablation, config_hash, duration_test_set, generalization_curve, write_results
from .fileio import load_motion, load_point_clouds, save_motion, save_point_clouds
from .model import MotionPriorModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import KINDS, MotionSpec, generate, make_specs, make_splits, random_shapes
from .training import TrainConfig, history_csv, train

log = logging.getLogger("motionprim")

DATASET_INDEX = "dataset.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Reports parse errors as a single ``error: usage:`` line, exit code 2."""

    def error(self, message):
        print(f"error: usage: {message} (see --help)", file=sys.stderr)
        sys.exit(2)


def set_determinism(seed, deterministic):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: line {e.lineno}: {e.msg}") from e
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e


def pick(args, cfg, name, default=None):
    """Flag value if given, else config value, else ``default``."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def required(args, cfg, name):
    value = pick(args, cfg, name)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required (flag or config key {name!r})")
    return value


def provenance(args, extra=None):
    d = {"command": args.command_line, "seed": args.seed}
    d.update(extra or {})
    return d


# synth ---------------------------------------------------------------------

def load_specs(path):
    """Spec file: either ``{"specs": [MotionSpec dicts]}`` or a grid
    ``{"kinds": [...], "n_shapes": int, "duration": s, "fps": f, "seed": int}``."""
    d = read_config(path)
    if "specs" in d:
        return [MotionSpec.from_dict(s) for s in d["specs"]], d
    kinds = [tuple(k) if isinstance(k, list) else k for k in d.get("kinds", KINDS)]
    rng = np.random.default_rng(d.get("seed", 0))
    shapes = [tuple(s) for s in d["shapes"]] if "shapes" in d else random_shapes(d.get("n_shapes", 4), rng)
    return make_specs(kinds, shapes, float(d.get("duration", 6.0)), float(d.get("fps", 30.0)), d.get("seed", 0)), d


def cmd_synth(args, cfg):
    spec_path = required(args, cfg, "spec")
    out = Path(required(args, cfg, "out"))
    specs, spec_doc = load_specs(spec_path)
    chash = config_hash(spec_doc)
    try:
        train_specs, val_specs = make_splits(specs, args.seed)
        split = {id(s): "train" for s in train_specs} | {id(s): "validation" for s in val_specs}
    except MotionPrimError:
        if not pick(args, cfg, "no_split", False):
            raise
        split = {id(s): "train" for s in specs}
    entries = []
    for i, spec in enumerate(specs):
        name = f"{i:04d}_{spec.kind}.motion.json"
        save_motion(generate(spec), out / name, provenance(args, {"config_hash": chash, "spec": spec.to_dict()}))
        entries.append({"file": name, "split": split[id(spec)], "spec": spec.to_dict()})
    index = {"format_version": 1, "config_hash": chash, "provenance": provenance(args), "sequences": entries}
    (out / DATASET_INDEX).write_text(json.dumps(index, indent=1, sort_keys=True))
    print(f"wrote {len(entries)} sequences to {out}")


def load_dataset(data_dir, split=None):
    data_dir = Path(data_dir)
    index_path = data_dir / DATASET_INDEX
    if index_path.exists():
        index = json.loads(index_path.read_text())
        entries = [e for e in index["sequences"] if split is None or e["split"] == split]
        return [load_motion(data_dir / e["file"]) for e in entries], entries
    files = sorted(data_dir.glob("*.motion.json"))
    return [load_motion(f) for f in files], [{"file": f.name} for f in files]


# train ---------------------------------------------------------------------

def build_configs(cfg, args):
    model_opts = dict(cfg.get("model", {}))
    if getattr(args, "fixed_delta", False):
        model_opts["fixed_delta"] = True
    train_opts = dict(cfg.get("train", {}))
    train_opts["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_opts["total_epochs"] = args.epochs
    return ModelConfig.from_dict(model_opts), TrainConfig.from_dict(train_opts)


def cmd_train(args, cfg):
    data = required(args, cfg, "data")
    out = Path(pick(args, cfg, "out", "run"))
    model_cfg, train_cfg = build_configs(cfg, args)
    dataset, _ = load_dataset(data, "train")
    if not dataset:
        raise UsageError(f"no training sequences under {data}")
    chash = model_cfg.hash()
    meta = provenance(args, {"config_hash": chash, "train_config": train_cfg.to_dict()})
    torch.manual_seed(args.seed)
    model = MotionPriorModel(model_cfg)
    body = KinematicBody(default_skeleton(), train_cfg.samples_per_bone)
    result = train(model, dataset, train_cfg, body)
    header = [f"command: {args.command_line}", f"config_hash: {chash}", f"seed: {args.seed}",
              f"lr_reductions: {result.lr_reductions}"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "loss.csv").write_text(history_csv(result.history, header))
    extra = {}
    init_opts = dict(cfg.get("init_encoder", {}))
    if args.init_epochs is not None:
        init_opts["epochs"] = args.init_epochs
    if init_opts.get("epochs", InitTrainConfig.epochs) > 0:
        encoder_cfg = InitEncoderConfig.matching(model_cfg, **init_opts.pop("encoder", {}))
        torch.manual_seed(args.seed)
        encoder = InitEncoder(encoder_cfg)
        icfg = InitTrainConfig(**{**init_opts, "seed": args.seed})
        history = train_init_encoder(encoder, model, dataset, icfg)
        extra["init_encoder"] = encoder
        meta["init_train_config"] = icfg.to_dict()
        meta["init_final_loss"] = history[-1]["loss"]
    ckpt = save_checkpoint(out / "prior.pt", model, extra, meta, default_skeleton())
    print(f"checkpoint {ckpt}; loss history {out / 'loss.csv'} ({len(result.history)} epochs)")


def load_models(path):
    prior, sidecar, blob = load_checkpoint(path)
    encoder = None
    if "init_encoder" in blob:
        encoder = InitEncoder(InitEncoderConfig.from_dict(sidecar["init_encoder_config"]))
        encoder.load_state_dict(blob["init_encoder"])
        encoder.eval()
    return prior, encoder, sidecar


# eval-gen / ablate -----------------------------------------------------------

def parse_durations(value):
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    return [float(v) for v in value]


DEFAULT_DURATIONS = [0.2, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0]


def split_specs(data_dir, split):
    _, entries = load_dataset(data_dir, split)
    specs = [MotionSpec.from_dict(e["spec"]) for e in entries if "spec" in e]
    if not specs:
        raise UsageError(f"no {split} sequences with specs under {data_dir}")
    return specs


def cmd_eval_gen(args, cfg):
    prior, _, sidecar = load_models(required(args, cfg, "checkpoint"))
    durations = parse_durations(pick(args, cfg, "durations")) or DEFAULT_DURATIONS
    split = pick(args, cfg, "split", "validation")
    specs = split_specs(required(args, cfg, "data"), split)
    rows = generalization_curve(prior, duration_test_set(specs, durations), args.stochastic, args.seed)
    out = Path(pick(args, cfg, "out", "eval_gen.csv"))
    meta = {"command": args.command_line, "config_hash": sidecar["config_hash"], "seed": args.seed,
            "split": split, "aggregation": "mean over sequences, then per duration",
            "latents": "sampled" if args.stochastic else "mean"}
    best = min(rows, key=lambda r: r["mpjpe_mm"])
    write_results(rows, out, out.with_suffix(".json"), meta, {"best_duration": best["duration"]})
    print(f"curve written to {out}; lowest MPJPE {best['mpjpe_mm']:.2f} mm at {best['duration']} s")


def cmd_ablate(args, cfg):
    data = required(args, cfg, "data")
    variants = cfg.get("variants")
    if not variants:
        raise UsageError("ablation config needs a non-empty 'variants' list")
    base_model = cfg.get("model", {})
    configs = {v["name"]: ModelConfig.from_dict({**base_model, **v.get("model", {})}) for v in variants}
    if args.fixed_delta:
        configs.update({f"{k}+fixed_delta": ModelConfig.from_dict({**c.to_dict(), "fixed_delta": True})
                        for k, c in list(configs.items())})
    _, train_cfg = build_configs(cfg, args)
    seeds = cfg.get("seeds", [args.seed])
    durations = parse_durations(pick(args, cfg, "durations")) or DEFAULT_DURATIONS
    train_set, _ = load_dataset(data, "train")
    tests = duration_test_set(split_specs(data, "validation"), durations)
    rows = ablation(train_set, tests, configs, train_cfg, seeds)
    out = Path(pick(args, cfg, "out", "ablation.csv"))
    meta = {"command": args.command_line, "config_hash": config_hash(cfg), "seed": args.seed, "seeds": seeds,
            "model_hashes": {k: c.hash() for k, c in configs.items()}}
    summary = {}
    for name in configs:
        vals = [r["mpjpe_mm"] for r in rows if r["name"] == name]
        summary[name] = float(np.mean(vals))
    write_results(rows, out, out.with_suffix(".json"), meta, {"mean_mpjpe_mm": summary})
    print(f"ablation table written to {out}")


# complete / downsample / export ------------------------------------------------

def cmd_downsample(args, cfg):
    pcs = load_point_clouds(required(args, cfg, "input"))
    points = int(required(args, cfg, "points"))
    fps = float(required(args, cfg, "fps"))
    out = downsample(pcs, points, fps, np.random.default_rng(args.seed))
    path = save_point_clouds(out, required(args, cfg, "out"), pick(args, cfg, "format", "bin"),
                             provenance(args, {"config_hash": config_hash({"points": points, "fps": fps})}))
    print(f"{out.n_frames} frames x {points} points written to {path}")


def cmd_complete(args, cfg):
    ckpt = required(args, cfg, "checkpoint")
    prior, encoder, sidecar = load_models(ckpt)
    if encoder is None:
        raise UntrainedInitEncoder(f"checkpoint {ckpt} has no initialization encoder")
    pcs = load_point_clouds(required(args, cfg, "input"))
    points, fps = pick(args, cfg, "points"), pick(args, cfg, "fps")
    if points is not None or fps is not None:
        pcs = downsample(pcs, int(points or pcs.min_points), float(fps or pcs.fps),
                         np.random.default_rng(args.seed))
    opts = dict(cfg.get("completion", {}))
    for key in ("lambda_prior", "iterations", "step_size"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    opts["output_fps"] = float(pick(args, cfg, "out_fps", 30.0))
    ccfg = CompletionConfig(**opts)
    res = complete(prior, encoder, pcs, ccfg)
    out = Path(pick(args, cfg, "out", "completed.motion.json"))
    chash = config_hash({"prior": sidecar["config_hash"], "completion": ccfg.to_dict()})
    save_motion(res.motion, out, provenance(args, {"config_hash": chash, "completion": ccfg.to_dict()}))
    report = {
        "command": args.command_line, "config_hash": chash, "seed": args.seed,
        "input_frames": pcs.n_frames, "input_points_min": pcs.min_points,
        "output_frames": res.motion.n_frames, "output_fps": ccfg.output_fps,
        "chamfer_observed_init_mm": res.chamfer_init_mm, "chamfer_observed_final_mm": res.chamfer_final_mm,
        "objective": res.objective, "beta": res.beta.double().tolist(),
    }
    out.with_name(out.name.replace(".motion.json", "") + ".report.json").write_text(
        json.dumps(report, indent=1, sort_keys=True))
    print(f"{res.motion.n_frames} frames written to {out}; chamfer {res.chamfer_init_mm:.2f} -> "
          f"{res.chamfer_final_mm:.2f} mm")


def cmd_export(args, cfg):
    seq = load_motion(required(args, cfg, "input"))
    out = Path(required(args, cfg, "out"))
    samples = int(pick(args, cfg, "surface_samples", 64))
    skel = default_skeleton()
    out.mkdir(parents=True, exist_ok=True)
    joints = KinematicBody(skel).joints(seq.theta, seq.gamma, seq.beta).numpy()
    for i, frame in enumerate(joints):
        np.savetxt(out / f"joints_{i:05d}.xyz", frame, fmt="%.17g")
    surface = surface_cloud_sequence(seq, samples, skel)
    chash = config_hash({"surface_samples": samples})
    save_point_clouds(surface, out / "surface.manifest.json", pick(args, cfg, "format", "bin"),
                      provenance(args, {"config_hash": chash}))
    print(f"exported {seq.n_frames} frames to {out}")


# parser --------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval-gen": cmd_eval_gen, "ablate": cmd_ablate,
    "complete": cmd_complete, "downsample": cmd_downsample, "export": cmd_export,
}


def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                        help="single-threaded deterministic numerics")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config; flags override it")

    p = Parser(prog="motionprim", parents=[common],
                                description="Sequential latent-primitive motion prior toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate synthetic motions from a spec file")
    s.add_argument("--spec")
    s.add_argument("--out")
    s.add_argument("--no-split", action="store_true", default=None,
                   help="put everything in the training split when holding out is impossible")

    s = sub.add_parser("train", parents=[common], help="train the prior (and the initialization encoder)")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--init-epochs", type=int, help="initialization encoder steps; 0 skips it")
    s.add_argument("--fixed-delta", action="store_true")

    s = sub.add_parser("eval-gen", parents=[common], help="MPJPE over a grid of sequence durations")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--durations", help="comma separated seconds")
    s.add_argument("--out")
    s.add_argument("--stochastic", action="store_true", help="sample latents instead of using the mean")

    s = sub.add_parser("ablate", parents=[common], help="train and compare model variants")
    s.add_argument("--data")
    s.add_argument("--durations")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--fixed-delta", action="store_true", help="also run each variant with uniform segments")

    s = sub.add_parser("complete", parents=[common], help="complete a sparse point-cloud sequence")
    s.add_argument("--checkpoint")
    s.add_argument("--in", dest="input")
    s.add_argument("--points", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--out-fps", type=float)
    s.add_argument("--out")
    s.add_argument("--lambda-prior", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--step-size", type=float)

    s = sub.add_parser("downsample", parents=[common], help="spatially and temporally subsample point clouds")
    s.add_argument("--in", dest="input")
    s.add_argument("--points", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--out")
    s.add_argument("--format", choices=["bin", "txt"])

    s = sub.add_parser("export", parents=[common], help="dump per-frame joint and surface xyz files")
    s.add_argument("--in", dest="input")
    s.add_argument("--out")
    s.add_argument("--surface-samples", type=int)
    s.add_argument("--format", choices=["bin", "txt"])
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", 0)
    args.deterministic = getattr(args, "deterministic", False)
    args.config = getattr(args, "config", None)
    args.command_line = shlex.join(["motionprim", *argv])
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        set_determinism(args.seed, args.deterministic)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except MotionPrimError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io_error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: invalid_input: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
