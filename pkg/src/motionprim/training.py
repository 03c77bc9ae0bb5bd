"""CVAE training loop: subsequence sampling, staged 3D loss weight and a
plateau learning-rate schedule."""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .body import KinematicBody, default_skeleton
from .errors import NonFiniteLoss, SourceTooShort
from .losses import (
    LossWeights, duration_reg, global_rec_loss, kl_loss, point_term, segment_rec_loss, total_loss,
)
from .model import sample, save_checkpoint
from .motion import normalize

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_global", "L_segment", "L_KL", "L_reg", "L_3D", "loss", "lr", "lambda_3D")


@dataclass
class TrainConfig:
    batch_size: int = 16
    n_frames: int = 100
    duration_range: tuple = (3.0, 5.0)
    lr_stages: tuple = (1e-4, 1e-5, 1e-6)
    plateau_patience: int = 20
    lambda_3d_switch_epoch: int = 500
    total_epochs: int = 1000
    seed: int = 0
    lambda_kl: float = 1e-4
    lambda_reg: float = 1e-2
    samples_per_bone: int = 4
    windows_per_epoch: int = 1
    warmup_epochs: int = 0
    checkpoint_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        self.duration_range = tuple(float(x) for x in self.duration_range)
        self.lr_stages = tuple(float(x) for x in self.lr_stages)
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValueError("duration_range must satisfy 0 < low <= high")
        for name in ("batch_size", "n_frames", "plateau_patience", "total_epochs", "samples_per_bone",
                     "windows_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not self.lr_stages or any(lr <= 0 for lr in self.lr_stages):
            raise ValueError("lr_stages must be positive")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["duration_range"] = list(self.duration_range)
        d["lr_stages"] = list(self.lr_stages)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def lambda_3d_for_epoch(epoch, switch_epoch):
    """Zero during the first ``switch_epoch`` (1-indexed) epochs, then one."""
    return 0.0 if epoch <= switch_epoch else 1.0


class PlateauSchedule:
    """Step down through ``stages`` after ``patience`` consecutive epochs
    without a new running minimum of the epoch loss.

    ``step(loss)`` is called once per epoch (epochs counted from 1) and
    returns the learning rate for the next epoch.
    """

    def __init__(self, stages, patience):
        self.stages = tuple(stages)
        self.patience = patience
        self.stage = 0
        self.best = math.inf
        self.bad_epochs = 0
        self.epoch = 0
        self.reductions = []

    @property
    def lr(self):
        return self.stages[self.stage]

    def reset_best(self):
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience and self.stage + 1 < len(self.stages):
            self.stage += 1
            self.bad_epochs = 0
            self.reductions.append(self.epoch)
        return self.lr


def sample_subsequence(source, rng, n_frames=100, duration_range=(3.0, 5.0)):
    """Random window with duration uniform in ``duration_range`` (capped at
    the source duration), resampled to exactly ``n_frames`` frames."""
    lo, hi = duration_range
    if source.duration < lo:
        raise SourceTooShort(f"source lasts {source.duration:.3f} s, shorter than {lo} s")
    d = rng.uniform(lo, min(hi, source.duration))
    start = source.timestamps[0] + rng.uniform(0.0, source.duration - d)
    t = np.linspace(start, start + d, n_frames)
    return source.resample(t)


@dataclass
class Batch:
    theta: torch.Tensor
    gamma: torch.Tensor
    tau: torch.Tensor
    beta: torch.Tensor
    gamma_scale: torch.Tensor
    gamma_center: torch.Tensor
    world_gamma: torch.Tensor

    def to_world(self, gamma_n):
        return gamma_n * self.gamma_scale.unsqueeze(-2) + self.gamma_center.unsqueeze(-2)


def make_batch(sequences, dtype=torch.float32):
    """Normalize each sequence and stack; all must share ``n_frames``."""
    parts = {k: [] for k in ("theta", "gamma", "tau", "beta", "scale", "center", "world")}
    for seq in sequences:
        norm, info = normalize(seq)
        parts["theta"].append(norm.theta)
        parts["gamma"].append(norm.gamma)
        parts["tau"].append(norm.timestamps)
        parts["beta"].append(seq.beta)
        parts["scale"].append(info.gamma_scale)
        parts["center"].append(info.gamma_center)
        parts["world"].append(seq.gamma)
    t = {k: torch.tensor(np.stack(v), dtype=dtype) for k, v in parts.items()}
    return Batch(t["theta"], t["gamma"], t["tau"], t["beta"], t["scale"], t["center"], t["world"])


def compute_losses(model, batch, weights, body=None, noise=None, gt_points=None, need_points=False):
    """Forward pass plus every objective term; returns a dict of tensors."""
    dist = model.encode(batch.theta, batch.gamma, batch.tau)
    z = dist.mu if noise is None else sample(dist, noise)
    out = model.decode(z, batch.beta, batch.tau)
    # the point term is only evaluated (and logged) when it is requested
    terms = {"L_3D": torch.full((), math.nan, dtype=batch.theta.dtype)}
    pred_points = None
    if body is not None and (weights.lambda_3d or need_points):
        if gt_points is None:
            with torch.no_grad():
                gt_points = body.surface(batch.theta, batch.world_gamma, batch.beta.unsqueeze(-2))
        with torch.set_grad_enabled(torch.is_grad_enabled() and bool(weights.lambda_3d)):
            pred_points = body.surface(out.theta, batch.to_world(out.gamma), batch.beta.unsqueeze(-2))
            terms["L_3D"] = point_term(pred_points, gt_points)
    terms["L_global"] = global_rec_loss(
        out.theta, out.gamma, batch.theta, batch.gamma,
        weights.lambda_3d, pred_points, gt_points,
    )
    terms["L_segment"] = segment_rec_loss(out.seg_theta, out.seg_gamma, out.masks, batch.theta, batch.gamma)
    terms["L_KL"] = kl_loss(dist.mu, dist.log_sigma)
    terms["L_reg"] = duration_reg(out.layout.delta)
    terms["loss"] = total_loss(terms["L_global"], terms["L_segment"], terms["L_KL"], terms["L_reg"], weights)
    terms["output"] = out
    terms["dist"] = dist
    return terms


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list = field(default_factory=list)
    lr_reductions: list = field(default_factory=list)


def train(model, dataset, cfg, body=None, checkpoint_path=None, metadata=None, on_epoch=None):
    """Fit ``model`` on ``dataset`` (list of world-space FrameSequences).

    Every epoch shuffles the dataset, draws ``windows_per_epoch`` random
    subsequences per item and takes one optimizer step per batch. The logged
    losses are epoch means.
    """
    if not dataset:
        raise ValueError("training needs at least one sequence")
    dtype = cfg.torch_dtype
    model.to(dtype).train()
    body = body or KinematicBody(default_skeleton(), cfg.samples_per_bone)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    schedule = PlateauSchedule(cfg.lr_stages, cfg.plateau_patience)
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    m, D = model.cfg.n_primitives, model.cfg.latent_dim
    result = TrainResult(model)

    for epoch in range(1, cfg.total_epochs + 1):
        lam3d = lambda_3d_for_epoch(epoch, cfg.lambda_3d_switch_epoch)
        if epoch == cfg.lambda_3d_switch_epoch + 1:
            # the objective changes here, so the plateau minimum restarts
            schedule.reset_best()
        weights = LossWeights(cfg.lambda_kl, cfg.lambda_reg, lam3d)
        # linear warmup scales the first stage over the first warmup_epochs
        lr = schedule.lr * min(1.0, epoch / cfg.warmup_epochs) if cfg.warmup_epochs else schedule.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(np.repeat(np.arange(len(dataset)), cfg.windows_per_epoch))
        sums = dict.fromkeys(("L_global", "L_segment", "L_KL", "L_reg", "L_3D", "loss"), 0.0)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            subs = [sample_subsequence(dataset[i], rng, cfg.n_frames, cfg.duration_range) for i in idx]
            batch = make_batch(subs, dtype)
            noise = torch.randn(len(idx), m, D, generator=noise_gen, dtype=dtype)
            terms = compute_losses(model, batch, weights, body, noise)
            loss = terms["loss"]
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite training loss at epoch {epoch}",
                    {"epoch": epoch, "batch_indices": idx.tolist(),
                     "terms": {k: float(terms[k].detach()) for k in sums},
                     "last_history": result.history[-1:] if result.history else []},
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for k in sums:
                sums[k] += float(terms[k].detach())
            n_batches += 1
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
               "lr": lr, "lambda_3D": lam3d}
        result.history.append(row)
        schedule.step(row["loss"])
        if on_epoch is not None:
            on_epoch(row)
        if epoch % max(1, cfg.total_epochs // 10) == 0:
            log.info("epoch %d loss %.5f lr %.1e", epoch, row["loss"], row["lr"])
        if checkpoint_path and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.total_epochs):
            meta = {"train_config": cfg.to_dict(), "epoch": epoch, **(metadata or {})}
            save_checkpoint(checkpoint_path, model, metadata=meta, skeleton=getattr(body, "skeleton", None))
    result.lr_reductions = list(schedule.reductions)
    model.eval()
    return result


def history_csv(history, header=None):
    """Render loss history as CSV text; ``header`` lines become ``#`` comments."""
    buf = io.StringIO()
    for line in header or ():
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def read_history_csv(path):
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def load_train_config(path):
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))
