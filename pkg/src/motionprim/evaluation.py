"""Desk-scale experiment harnesses: duration generalization, ablations and
the completion sweep. All latents are taken at the distribution mean unless
``stochastic`` is requested."""

import csv
import hashlib
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .body import KinematicBody, default_skeleton, mpjpe
from .completion import CompletionConfig, complete, downsample, output_timestamps, surface_cloud_sequence
from .model import MotionPriorModel, sample
from .motion import normalize
from .synthetic import generate, with_duration
from .training import train


def _model_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def reconstruct(model, seq, noise=None):
    """Encode and decode one world-space sequence at its own timestamps."""
    dtype = _model_dtype(model)
    norm, info = normalize(seq)
    theta = torch.tensor(norm.theta, dtype=dtype)[None]
    gamma = torch.tensor(norm.gamma, dtype=dtype)[None]
    tau = torch.tensor(norm.timestamps, dtype=dtype)[None]
    beta = torch.tensor(seq.beta, dtype=dtype)[None]
    dist = model.encode(theta, gamma, tau)
    z = dist.mu if noise is None else sample(dist, noise)
    out = model.decode(z, beta, tau)
    gamma_w = info.denormalize_gamma(out.gamma[0].double().numpy())
    return replace(seq, theta=out.theta[0].double().numpy(), gamma=gamma_w, meta=dict(seq.meta))


def sequence_mpjpe(model, seq, skeleton=None, noise=None):
    skel = skeleton or default_skeleton()
    rec = reconstruct(model, seq, noise)
    body = KinematicBody(skel)
    return mpjpe(body.joints(rec.theta, rec.gamma, rec.beta), body.joints(seq.theta, seq.gamma, seq.beta))


def mean_mpjpe(model, sequences, skeleton=None):
    return float(np.mean([sequence_mpjpe(model, s, skeleton) for s in sequences]))


def config_hash(obj):
    """Short content hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def duration_test_set(specs, durations):
    """``{duration: [FrameSequence]}`` regenerating every spec at each duration."""
    return {float(d): [generate(with_duration(s, float(d))) for s in specs] for d in durations}


def generalization_curve(model, test_sets, stochastic=False, seed=0):
    """Per-duration MPJPE (mm), averaged per sequence and then per duration.

    ``test_sets`` maps a duration to its sequences. Durations are only ever
    handled through timestamp normalization, so any length is accepted.
    """
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for d in sorted(test_sets):
        errors = []
        for seq in test_sets[d]:
            noise = None
            if stochastic:
                noise = torch.randn(1, model.cfg.n_primitives, model.cfg.latent_dim,
                                    generator=gen, dtype=_model_dtype(model))
            errors.append(sequence_mpjpe(model, seq, noise=noise))
        rows.append({"duration": d, "mpjpe_mm": float(np.mean(errors)), "n_sequences": len(errors)})
    return rows


def ablation(train_set, test_sets, configs, train_cfg, seeds=(0,), on_trained=None):
    """Train every named model config for every seed and evaluate its
    generalization curve; returns flat rows ``name, seed, duration, mpjpe_mm``.

    ``configs`` maps a name to a :class:`ModelConfig`; ``fixed_delta=True``
    gives the uniform-segmentation baseline.
    """
    rows = []
    for name, cfg in configs.items():
        for seed in seeds:
            torch.manual_seed(seed)
            model = MotionPriorModel(cfg)
            result = train(model, train_set, replace(train_cfg, seed=seed))
            if on_trained is not None:
                on_trained(name, seed, result)
            for r in generalization_curve(result.model, test_sets):
                rows.append({"name": name, "seed": seed, "config_hash": cfg.hash(), **r})
    return rows


def completion_sweep(prior, encoder, sequences, points=(100, 1000, None), fps=(5.0, 10.0),
                     cfg=None, seed=0, dense_samples_per_bone=64):
    """Mean Chamfer (mm) of completed motions against the dense ground-truth
    surface on the output grid, for every (points per frame, input fps) cell.

    ``None`` in ``points`` keeps every dense surface sample. Returns one row
    per cell and a per-sequence list.
    """
    cfg = cfg or CompletionConfig()
    skel = default_skeleton()
    rng = np.random.default_rng(seed)
    cells, per_seq = [], []
    dense = [surface_cloud_sequence(s, dense_samples_per_bone, skel) for s in sequences]
    for k in points:
        for f in fps:
            init, final = [], []
            for i, (seq, full) in enumerate(zip(sequences, dense)):
                obs = downsample(full, k or full.min_points, f, rng)
                out_t = output_timestamps(obs, cfg.output_fps)
                ref_t = out_t[out_t <= seq.timestamps[-1] + 1e-9]
                ref = surface_cloud_sequence(seq.resample(ref_t), dense_samples_per_bone, skel)
                res = complete(prior, encoder, obs, cfg, skel, eval_clouds=ref)
                init.append(res.chamfer_init_mm)
                final.append(res.chamfer_final_mm)
                per_seq.append({"points": k or "dense", "fps": f, "sequence": i,
                                "chamfer_init_mm": res.chamfer_init_mm, "chamfer_mm": res.chamfer_final_mm,
                                "output_frames": res.motion.n_frames, "iterations": len(res.objective)})
            cells.append({"points": k or "dense", "fps": f, "chamfer_mm": float(np.mean(final)),
                          "chamfer_init_mm": float(np.mean(init)), "n_sequences": len(final)})
    return cells, per_seq


def write_results(rows, csv_path, json_path=None, metadata=None, summary=None):
    """CSV of ``rows`` with ``#`` metadata header lines, plus an optional
    JSON document holding the metadata, the rows and a summary."""
    metadata = metadata or {}
    buf = io.StringIO()
    for k in sorted(metadata):
        buf.write(f"# {k}: {json.dumps(metadata[k], sort_keys=True)}\n")
    if rows:
        cols = list(rows[0])
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    Path(csv_path).write_text(buf.getvalue())
    if json_path is not None:
        doc = {"metadata": metadata, "rows": rows, "summary": summary or {}}
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True))
