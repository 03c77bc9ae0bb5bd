"""Completion of sparse point-cloud sequences with the motion prior.

A PointNet-style initialization encoder maps the observed clouds to latent
primitives and a body shape; both are then refined by gradient descent on a
Chamfer objective plus a pull towards the initialization, and the result is
decoded densely at the requested frame rate.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .body import default_skeleton, surface_points
from .errors import EmptyCloud, NonFiniteObjective, ResolutionTooHigh, UntrainedInitEncoder
from .fileio import PointCloudSequence
from .losses import global_rec_loss
from .model import SequenceTransformer, check_normalized_time, sinusoidal_encoding
from .motion import FrameSequence, NormalizationInfo
from .training import sample_subsequence

log = logging.getLogger(__name__)


def _as_points(x, dtype=torch.float64):
    t = torch.as_tensor(x, dtype=dtype) if not torch.is_tensor(x) else x
    if t.ndim < 2 or t.shape[-1] != 3:
        raise ValueError(f"point set must be (k, 3), got {tuple(t.shape)}")
    if t.shape[-2] == 0:
        raise EmptyCloud("point set is empty")
    return t


def chamfer_metres(a, b):
    """Differentiable symmetric mean nearest-neighbour distance in metres.

    Works on ``(k, 3)`` or batched ``(..., k, 3)`` inputs; returns one value
    per leading index.
    """
    a, b = _as_points(a), _as_points(b)
    b = b.to(a.dtype)
    # neighbours are found without autograd; only the matched pairs are
    # differentiated (cdist's backward is slow and gives the same gradient)
    with torch.no_grad():
        d = torch.cdist(a, b)
        ia, ib = d.min(-1).indices, d.min(-2).indices
    near_b = torch.gather(b, -2, ia[..., None].expand(*ia.shape, 3))
    near_a = torch.gather(a, -2, ib[..., None].expand(*ib.shape, 3))
    return 0.5 * (_norm(a - near_b).mean(-1) + _norm(b - near_a).mean(-1))


def _norm(v):
    # safe at zero distance, where the norm's gradient is undefined
    sq = (v * v).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def chamfer(a, b):
    """Symmetric Chamfer distance between two point sets (metres in), mm out."""
    with torch.no_grad():
        return float(chamfer_metres(a, b)) * 1000.0


def sequence_chamfer(pred_clouds, ref_clouds):
    """Mean per-frame Chamfer distance in mm over paired frame lists."""
    if len(pred_clouds) != len(ref_clouds):
        raise ValueError("frame counts differ")
    return float(np.mean([chamfer(p, r) for p, r in zip(pred_clouds, ref_clouds)]))


def surface_cloud_sequence(seq, samples_per_bone=64, skeleton=None):
    """Dense point clouds of a motion's surface, one per frame."""
    pts = surface_points(seq.theta, seq.gamma, seq.beta, skeleton or default_skeleton(), samples_per_bone)
    return PointCloudSequence(seq.timestamps.copy(), list(pts.numpy()))


def downsample(pcs, points_per_frame, fps, rng):
    """Pick the nearest source frame for each target timestamp at ``fps`` and
    a uniform random subset of ``points_per_frame`` points in each."""
    if pcs.n_frames < 2:
        raise ResolutionTooHigh("temporal downsampling needs at least two source frames")
    if fps > pcs.fps * (1 + 1e-9):
        raise ResolutionTooHigh(f"requested {fps} fps exceeds source {pcs.fps:.6g} fps")
    if points_per_frame > pcs.min_points:
        raise ResolutionTooHigh(
            f"requested {points_per_frame} points per frame, source has as few as {pcs.min_points}"
        )
    targets = pcs.timestamps[0] + np.arange(int(math.floor(pcs.duration * fps + 1e-9)) + 1) / fps
    idx = np.abs(pcs.timestamps[None, :] - targets[:, None]).argmin(1)
    idx = np.unique(idx)
    clouds = []
    for i in idx:
        c = pcs.clouds[i]
        clouds.append(c[np.sort(rng.choice(len(c), points_per_frame, replace=False))])
    return PointCloudSequence(pcs.timestamps[idx], clouds)


def output_timestamps(pcs, output_fps):
    """``round(duration * output_fps)`` frames at exactly ``output_fps`` from
    the first observed timestamp; all lie inside the observed span."""
    if pcs.n_frames < 2:
        raise ValueError("completion needs at least two observed frames")
    n = int(round(pcs.duration * output_fps))
    return pcs.timestamps[0] + np.arange(n) / output_fps


def _rest_centroid_offset(skel):
    """Surface centroid minus root position in the rest pose."""
    from .rotation import identity_6d

    pts = surface_points(identity_6d(skel.n_joints), torch.zeros(3, dtype=torch.float64),
                         torch.zeros(skel.n_shape, dtype=torch.float64), skel, 8)
    return pts.mean(0).numpy()


def estimate_normalization(pcs, out_times=None, skeleton=None):
    """Normalization guessed from the cloud centroids: the per-axis bounding
    box of the centroid track, shifted by the rest-pose centroid offset, and
    the time range of the observed and output frames."""
    skel = skeleton or default_skeleton()
    centroids = np.stack([c.mean(0) for c in pcs.clouds]) - _rest_centroid_offset(skel)
    t_end = pcs.timestamps[-1] if out_times is None else max(pcs.timestamps[-1], out_times[-1])
    return NormalizationInfo(tuple(centroids.min(0).tolist()), tuple(centroids.max(0).tolist()),
                             float(pcs.timestamps[0]), float(t_end))


def _pad_clouds(clouds, dtype):
    """Stack clouds of unequal size by repeating each cloud's first point;
    duplicates leave a max-pool unchanged."""
    k = max(len(c) for c in clouds)
    out = []
    for c in clouds:
        c = np.asarray(c)
        if len(c) < k:
            c = np.concatenate([c, np.repeat(c[:1], k - len(c), axis=0)])
        out.append(c)
    return torch.tensor(np.stack(out), dtype=dtype)


@dataclass
class InitEncoderConfig:
    n_primitives: int = 8
    latent_dim: int = 256
    n_shape: int = 8
    point_hidden: int = 64
    embed_dim: int = 255
    n_heads: int = 8
    n_layers: int = 4
    n_query_layers: int = 1
    ff_dim: int = 512
    dropout: float = 0.0
    norm_first: bool = False

    @property
    def d_model(self):
        return self.embed_dim + 1

    @classmethod
    def matching(cls, prior_cfg, **overrides):
        shared = {f.name: getattr(prior_cfg, f.name) for f in fields(cls) if hasattr(prior_cfg, f.name)}
        shared.update(overrides)
        return cls(**shared)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})


class PointSetEmbedding(nn.Module):
    """Shared per-point MLP and max-pool over each frame, joined with the
    frame's normalized centroid and tau."""

    def __init__(self, hidden, embed_dim):
        super().__init__()
        self.point_mlp = nn.Sequential(
            nn.Linear(3, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 2 * hidden)
        )
        self.proj = nn.Linear(2 * hidden + 3, embed_dim)

    def forward(self, points, centroid_n, tau):
        # points: (B, n, k, 3) relative to the frame centroid
        pooled = self.point_mlp(points).max(dim=-2).values
        return torch.cat([torch.tanh(self.proj(torch.cat([pooled, centroid_n], -1))), tau.unsqueeze(-1)], -1)


class InitEncoder(nn.Module):
    """Point-cloud sequence to ``(z, beta)``; shares the prior encoder's
    transformer topology with the frame embedding swapped for a set encoder."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.embed = PointSetEmbedding(cfg.point_hidden, cfg.embed_dim)
        self.transformer = SequenceTransformer(cfg)
        self.z_head = nn.Linear(cfg.d_model, cfg.latent_dim)
        self.beta_head = nn.Linear(cfg.d_model, cfg.n_shape)
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def forward(self, points, centroid_n, tau):
        tokens = self.embed(points, centroid_n, tau)
        tokens = tokens + sinusoidal_encoding(tau, tokens.shape[-1])
        out = self.transformer(tokens)
        return self.z_head(out), self.beta_head(out.mean(-2))


def encoder_inputs(pcs, info, dtype=torch.float32, skeleton=None):
    """Centred clouds ``(1, n, k, 3)``, normalized centroids and tau."""
    centroids = np.stack([c.mean(0) for c in pcs.clouds])
    points = _pad_clouds([c - m for c, m in zip(pcs.clouds, centroids)], dtype)
    cen = info.normalize_gamma(centroids - _rest_centroid_offset(skeleton or default_skeleton()))
    tau = torch.tensor(info.normalize_time(pcs.timestamps), dtype=dtype)
    return points[None], torch.tensor(cen, dtype=dtype)[None], tau[None]


@torch.no_grad()
def init_encode(encoder, pcs, info=None, skeleton=None):
    """``(z (m, D), beta (S,))`` predicted from a point-cloud sequence."""
    if not bool(encoder.trained):
        raise UntrainedInitEncoder("the initialization encoder has not been trained")
    info = info or estimate_normalization(pcs, skeleton=skeleton)
    dtype = next(encoder.parameters()).dtype
    points, cen, tau = encoder_inputs(pcs, info, dtype, skeleton)
    check_normalized_time(tau)
    z, beta = encoder(points, cen, tau)
    return z[0], beta[0]


@dataclass
class InitTrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    duration_range: tuple = (3.0, 5.0)
    fps_choices: tuple = (5.0, 10.0)
    points_choices: tuple = (100, 1000)
    dense_samples_per_bone: int = 64
    lambda_beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.duration_range = tuple(float(x) for x in self.duration_range)
        self.fps_choices = tuple(float(x) for x in self.fps_choices)
        self.points_choices = tuple(int(x) for x in self.points_choices)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    def to_dict(self):
        d = asdict(self)
        for k in ("duration_range", "fps_choices", "points_choices"):
            d[k] = list(d[k])
        return d


def _observation(seq, rng, cfg, skel):
    """Random sparse observation of a window of ``seq`` plus its ground truth
    at the observed frames."""
    fps = float(rng.choice(cfg.fps_choices))
    k = int(rng.choice(cfg.points_choices))
    d = rng.uniform(*cfg.duration_range)
    n = max(2, int(round(d * fps)))
    window = sample_subsequence(seq, rng, n, (min(d, seq.duration), min(d, seq.duration)))
    dense = surface_cloud_sequence(window, cfg.dense_samples_per_bone, skel)
    k = min(k, dense.min_points)
    clouds = [c[np.sort(rng.choice(len(c), k, replace=False))] for c in dense.clouds]
    return window, PointCloudSequence(window.timestamps, clouds)


def train_init_encoder(encoder, prior, dataset, cfg, skeleton=None):
    """Fit ``encoder`` with the prior frozen by decoding its prediction and
    matching the ground-truth motion, plus a shape regression term.

    Each batch shares one frame rate, point count and window length.
    """
    skel = skeleton or default_skeleton()
    rng = np.random.default_rng(cfg.seed)
    dtype = next(prior.parameters()).dtype
    encoder.to(dtype).train()
    prior.eval()
    for p in prior.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            batch_rng = np.random.default_rng(rng.integers(1 << 63))
            fps = float(batch_rng.choice(cfg.fps_choices))
            k = int(batch_rng.choice(cfg.points_choices))
            d = float(batch_rng.uniform(*cfg.duration_range))
            sub_cfg = InitTrainConfig(**{**cfg.to_dict(), "fps_choices": (fps,), "points_choices": (k,),
                                         "duration_range": (d, d)})
            idx = batch_rng.choice(len(dataset), min(cfg.batch_size, len(dataset)), replace=False)
            inputs, targets = [], []
            for i in idx:
                window, obs = _observation(dataset[i], batch_rng, sub_cfg, skel)
                info = estimate_normalization(obs, skeleton=skel)
                inputs.append(encoder_inputs(obs, info, dtype, skel))
                targets.append((window, info))
            points, cen, tau = (torch.cat(parts) for parts in zip(*inputs))
            gt_theta = torch.tensor(np.stack([w.theta for w, _ in targets]), dtype=dtype)
            gt_gamma = torch.tensor(np.stack([i.normalize_gamma(w.gamma) for w, i in targets]), dtype=dtype)
            gt_beta = torch.tensor(np.stack([w.beta for w, _ in targets]), dtype=dtype)
            z, beta = encoder(points, cen, tau)
            out = prior.decode(z, beta, tau)
            rec = global_rec_loss(out.theta, out.gamma, gt_theta, gt_gamma)
            shape = ((beta - gt_beta) ** 2).sum(-1).mean()
            loss = rec + cfg.lambda_beta * shape
            if not torch.isfinite(loss):
                raise NonFiniteObjective(f"non-finite encoder loss at epoch {epoch}", {"epoch": epoch})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append({"epoch": epoch, "L_global": float(rec.detach()), "L_beta": float(shape.detach()), "loss": float(loss.detach())})
    finally:
        for p in prior.parameters():
            p.requires_grad_(True)
    encoder.trained.fill_(True)
    encoder.eval()
    return history


@dataclass
class CompletionConfig:
    lambda_prior: float = 0.01
    iterations: int = 300
    step_size: float = 1e-2
    output_fps: float = 30.0
    rel_tol: float = 1e-5
    samples_per_bone: int = 16
    max_halvings: int = 20

    def __post_init__(self):
        for f in ("iterations", "step_size", "output_fps", "samples_per_bone"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.lambda_prior < 0 or self.rel_tol < 0:
            raise ValueError("lambda_prior and rel_tol must be nonnegative")

    def to_dict(self):
        return asdict(self)


def _group_by_size(clouds, dtype):
    """Frame indices bucketed by point count, with the stacked clouds."""
    groups = {}
    for i, c in enumerate(clouds):
        groups.setdefault(len(c), []).append(i)
    return [(idx, torch.tensor(np.stack([clouds[i] for i in idx]), dtype=dtype)) for idx in groups.values()]


class CompletionObjective:
    """``mean_i chamfer(surface(decode(z, beta, tau_i)), P_i)`` in metres plus
    ``lambda_prior * ||z - z_init||^2``."""

    def __init__(self, prior, pcs, info, z_init, lambda_prior, samples_per_bone=16, skeleton=None):
        self.prior = prior
        self.skel = skeleton or default_skeleton()
        self.samples_per_bone = samples_per_bone
        dtype = z_init.dtype
        self.tau = torch.tensor(info.normalize_time(pcs.timestamps), dtype=dtype)
        check_normalized_time(self.tau)
        self.scale = torch.tensor(info.gamma_scale, dtype=dtype)
        self.center = torch.tensor(info.gamma_center, dtype=dtype)
        self.groups = _group_by_size(pcs.clouds, dtype)
        self.z_init = z_init.detach().clone()
        self.lambda_prior = lambda_prior

    def chamfer_term(self, z, beta):
        out = self.prior.decode(z[None], beta[None], self.tau[None])
        gamma = out.gamma[0] * self.scale + self.center
        pts = surface_points(out.theta[0], gamma, beta, self.skel, self.samples_per_bone)
        total = 0.0
        for idx, clouds in self.groups:
            total = total + chamfer_metres(pts[idx], clouds).sum()
        return total / len(self.tau)

    def __call__(self, z, beta):
        return self.chamfer_term(z, beta) + self.lambda_prior * ((z - self.z_init) ** 2).sum()


@dataclass
class CompletionResult:
    motion: FrameSequence
    z: torch.Tensor
    beta: torch.Tensor
    z_init: torch.Tensor
    beta_init: torch.Tensor
    info: NormalizationInfo
    objective: list
    chamfer_init_mm: float
    chamfer_final_mm: float


def optimize_latents(objective, z, beta, cfg):
    """Adam on ``(z, beta)`` with step halving: a step that raises the
    objective is undone and retried from the same point with half the step
    size and fresh Adam moments (so the retry follows the sign of the
    gradient, a descent direction). Accepted objective values never
    increase. Model weights are never touched."""
    z = z.detach().clone().requires_grad_(True)
    beta = beta.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([z, beta], lr=cfg.step_size)
    accepted = []
    saved = None
    halvings = 0
    stepped = False
    for it in range(cfg.iterations):
        value = objective(z, beta)
        if not torch.isfinite(value) and saved is None:
            raise NonFiniteObjective("completion objective is not finite at the initialization", {"iteration": it})
        v = float(value.detach())
        if accepted and not v <= accepted[-1]:
            with torch.no_grad():
                z.copy_(saved[0])
                beta.copy_(saved[1])
            halvings += 1
            if halvings > cfg.max_halvings:
                stepped = False
                break
            opt = torch.optim.Adam([z, beta], lr=cfg.step_size * 0.5**halvings)
            z.grad, beta.grad = saved[2]
            opt.step()
            continue
        if accepted and abs(accepted[-1] - v) <= cfg.rel_tol * abs(accepted[-1]):
            accepted.append(v)
            stepped = False
            break
        accepted.append(v)
        grads = torch.autograd.grad(value, [z, beta])
        saved = (z.detach().clone(), beta.detach().clone(), grads)
        z.grad, beta.grad = grads
        opt.step()
        stepped = True
    if stepped:
        # the final step was never evaluated; keep it only if it helped
        with torch.no_grad():
            v = float(objective(z, beta))
            if v <= accepted[-1]:
                accepted.append(v)
            else:
                z.copy_(saved[0])
                beta.copy_(saved[1])
    return z.detach(), beta.detach(), accepted


def decode_motion(prior, z, beta, info, timestamps):
    """Dense world-space motion from latents at absolute ``timestamps``."""
    dtype = z.dtype
    tau = torch.tensor(info.normalize_time(timestamps), dtype=dtype)
    with torch.no_grad():
        out = prior.decode(z[None], beta[None], tau[None])
    gamma = info.denormalize_gamma(out.gamma[0].double().numpy())
    return FrameSequence(np.asarray(timestamps, dtype=np.float64), out.theta[0].double().numpy(), gamma,
                         beta.double().numpy(), meta={})


def complete(prior, encoder, pcs, cfg=None, skeleton=None, eval_clouds=None):
    """Complete a sparse point-cloud sequence into a dense motion.

    ``eval_clouds`` (a dense :class:`PointCloudSequence` on the output grid)
    is optional; when given, the Chamfer distances of the initial and the
    optimized surfaces to it are reported, otherwise the observations are
    used.
    """
    cfg = cfg or CompletionConfig()
    skel = skeleton or default_skeleton()
    out_t = output_timestamps(pcs, cfg.output_fps)
    info = estimate_normalization(pcs, out_t, skel)
    z0, beta0 = init_encode(encoder, pcs, info, skel)
    objective = CompletionObjective(prior, pcs, info, z0, cfg.lambda_prior, cfg.samples_per_bone, skel)
    z, beta, values = optimize_latents(objective, z0, beta0, cfg)
    motion = decode_motion(prior, z, beta, info, out_t)
    ref = eval_clouds or pcs
    c0 = motion_chamfer(decode_motion(prior, z0, beta0, info, ref.timestamps), ref, skel)
    c1 = motion_chamfer(decode_motion(prior, z, beta, info, ref.timestamps), ref, skel)
    log.info("completion: %d steps, chamfer %.2f -> %.2f mm", len(values), c0, c1)
    return CompletionResult(motion, z, beta, z0, beta0, info, values, c0, c1)


def motion_chamfer(motion, clouds, skeleton=None, samples_per_bone=64):
    """Mean Chamfer (mm) between a motion's surface and clouds at the same
    timestamps."""
    if len(motion.timestamps) != clouds.n_frames or not np.allclose(motion.timestamps, clouds.timestamps):
        raise ValueError("motion and clouds must share timestamps")
    surf = surface_cloud_sequence(motion, samples_per_bone, skeleton)
    return sequence_chamfer(surf.clouds, clouds.clouds)
