"""Sequence-of-latent-primitives motion prior.

The encoder maps ``n`` frames to ``m`` Gaussian latent primitives through a
transformer whose ``m`` learned query tokens cross-attend to the encoded
frames. The decoder turns each primitive into a segment duration, a rigid
transform and a time-continuous motion, then blends the segments with
Gaussian temporal masks.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import torch
from torch import nn

from .errors import SchemaVersionMismatch, UnnormalizedInput, ZeroWeightSum
from .rotation import IDENTITY_6D, RigidTransform, apply_rigid, blend_rot6d

CHECKPOINT_VERSION = 1
NORMALIZATION_CONVENTION = (
    "per-sequence: root displacement mapped per axis to [-1, 1] (constant axes to 0); "
    "timestamps mapped affinely to [0, 1]"
)


@dataclass
class ModelConfig:
    n_primitives: int = 8
    latent_dim: int = 256
    n_joints: int = 20
    n_shape: int = 8
    embed_dim: int = 255
    n_heads: int = 8
    n_layers: int = 4
    n_query_layers: int = 1
    ff_dim: int = 512
    decoder_hidden: int = 512
    decoder_depth: int = 4
    segment_hidden: int = 256
    segment_depth: int = 2
    n_oscillators: int = 32
    max_frequency: float = 16.0
    dropout: float = 0.0
    time_encoding: bool = True
    fixed_delta: bool = False
    norm_first: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if (self.embed_dim + 1) % self.n_heads:
            raise ValueError("embed_dim + 1 must be divisible by n_heads")

    @property
    def d_model(self):
        return self.embed_dim + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def tiny_config(**overrides):
    """Small configuration used by tests and desk-scale experiments."""
    cfg = dict(
        n_primitives=2, latent_dim=16, embed_dim=63, n_heads=4, n_layers=2,
        ff_dim=128, decoder_hidden=128, decoder_depth=3, segment_hidden=64,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def mlp(d_in, hidden, d_out, depth):
    layers, d = [], d_in
    for _ in range(depth - 1):
        layers += [nn.Linear(d, hidden), nn.SiLU()]
        d = hidden
    layers.append(nn.Linear(d, d_out))
    return nn.Sequential(*layers)


class LatentDistribution(NamedTuple):
    mu: torch.Tensor
    log_sigma: torch.Tensor


class SegmentLayout(NamedTuple):
    delta: torch.Tensor
    Delta: torch.Tensor
    rho: RigidTransform


class DecoderOutput(NamedTuple):
    theta: torch.Tensor
    gamma: torch.Tensor
    seg_theta: torch.Tensor
    seg_gamma: torch.Tensor
    masks: torch.Tensor
    layout: SegmentLayout


def sample(dist, noise):
    """Reparameterized draw ``mu + noise * exp(log_sigma)``."""
    return dist.mu + noise * torch.exp(dist.log_sigma)


def layout(delta_raw, rho, fixed=False):
    """Softmax durations over primitives and their cumulative starts."""
    if fixed:
        delta = torch.full_like(delta_raw, 1.0 / delta_raw.shape[-1])
    else:
        delta = torch.softmax(delta_raw, dim=-1)
    Delta = torch.cumsum(delta, dim=-1) - delta
    return SegmentLayout(delta, Delta, rho)


def log_gaussian_mask(tau, Delta, delta):
    center = Delta + delta / 2
    return -(((tau - center) / (delta / 2)) ** 2)


def gaussian_mask(tau, Delta, delta):
    """``exp(-((tau - (Delta + delta/2)) / (delta/2))^2)``: 1 at the segment
    centre and ``1/e`` at both segment edges."""
    return torch.exp(log_gaussian_mask(torch.as_tensor(tau), Delta, delta))


def transform_segments(theta_local, gamma_local, rho):
    """Apply each segment's rigid transform to its root rotation and
    displacement. ``theta_local`` is ``(..., m, n, J, 6)``, ``gamma_local``
    ``(..., m, n, 3)`` and ``rho`` fields ``(..., m, 6|3)``."""
    rho_b = RigidTransform(rho.rotation.unsqueeze(-2), rho.translation.unsqueeze(-2))
    root, gamma = apply_rigid(rho_b, theta_local[..., 0, :], gamma_local, check=False)
    theta = torch.cat([root.unsqueeze(-2), theta_local[..., 1:, :]], dim=-2)
    return theta, gamma


def combine(seg_theta, seg_gamma, seg_layout, tau, check=True):
    """Mask-weighted average of transformed segment outputs.

    ``seg_theta`` ``(..., m, n, J, 6)`` and ``seg_gamma`` ``(..., m, n, 3)``
    must already carry their rigid transforms; ``tau`` is ``(..., n)``.
    Returns ``(theta, gamma, masks)`` with masks ``(..., m, n)``.
    """
    tau = tau.unsqueeze(-2)
    logits = log_gaussian_mask(tau, seg_layout.Delta.unsqueeze(-1), seg_layout.delta.unsqueeze(-1))
    masks = torch.exp(logits)
    if check and bool((masks.sum(-2) <= 0).any()):
        raise ZeroWeightSum("all temporal masks vanish at some timestamp")
    # softmax of the log-masks equals G_i / sum G but never underflows
    weights = torch.softmax(logits, dim=-2)
    gamma = (weights.unsqueeze(-1) * seg_gamma).sum(-3)
    w = weights.movedim(-2, -1).unsqueeze(-2)  # (..., n, 1, m)
    rots = seg_theta.movedim(-4, -2)  # (..., n, J, m, 6)
    theta = blend_rot6d(w, rots, check=False)
    return theta, gamma, masks


def sinusoidal_encoding(tau, dim, scale=100.0):
    """Transformer-style sinusoids of ``scale * tau``; ``(..., dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tau.dtype, device=tau.device) / half)
    angles = (scale * tau).unsqueeze(-1) * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return nn.functional.pad(enc, (0, dim - 2 * half))


class FrameEmbedding(nn.Module):
    """Shared one-layer perceptron over (theta, gamma) with tau appended."""

    def __init__(self, n_in, embed_dim):
        super().__init__()
        self.linear = nn.Linear(n_in, embed_dim)

    def forward(self, x, tau):
        return torch.cat([torch.tanh(self.linear(x)), tau.unsqueeze(-1)], dim=-1)


class SequenceTransformer(nn.Module):
    """Self-attention over frame tokens, then ``m`` learned queries that
    cross-attend to them; emits one token per primitive."""

    def __init__(self, cfg):
        super().__init__()
        d = cfg.d_model
        enc_layer = nn.TransformerEncoderLayer(
            d, cfg.n_heads, cfg.ff_dim, cfg.dropout, activation="gelu", batch_first=True,
            norm_first=cfg.norm_first,
        )
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.n_layers, enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(
            d, cfg.n_heads, cfg.ff_dim, cfg.dropout, activation="gelu", batch_first=True,
            norm_first=cfg.norm_first,
        )
        self.query_decoder = nn.TransformerDecoder(dec_layer, cfg.n_query_layers)
        self.queries = nn.Parameter(torch.randn(cfg.n_primitives, d) * 0.1)

    def forward(self, tokens, padding_mask=None):
        memory = self.encoder(tokens, src_key_padding_mask=padding_mask)
        queries = self.queries.expand(tokens.shape[0], -1, -1).to(tokens.dtype)
        return self.query_decoder(queries, memory, memory_key_padding_mask=padding_mask)


class MotionEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.embed = FrameEmbedding(cfg.n_joints * 6 + 3, cfg.embed_dim)
        self.transformer = SequenceTransformer(cfg)
        self.head = nn.Linear(cfg.d_model, 2 * cfg.latent_dim)
        with torch.no_grad():
            self.head.bias[cfg.latent_dim:] = -3.0

    def forward(self, theta, gamma, tau, padding_mask=None):
        tokens = self.embed(torch.cat([theta.flatten(-2), gamma], dim=-1), tau)
        if self.cfg.time_encoding:
            # fixed sinusoids of tau let attention localize frames in time
            tokens = tokens + sinusoidal_encoding(tau, tokens.shape[-1])
        out = self.head(self.transformer(tokens, padding_mask))
        mu, log_sigma = out.split(self.cfg.latent_dim, dim=-1)
        return LatentDistribution(mu, log_sigma)


class PrimitiveDecoder(nn.Module):
    """Two heads over ``(z_i, beta)``: a time-free head emitting the raw
    duration and rigid transform, and a motion head additionally fed the
    segment-local time ``s = (tau - Delta_i) / delta_i``.

    The motion head starts with a bank of oscillators ``sin(w_k a_k s + b_k)``
    whose frequency gains ``a_k`` and phases ``b_k`` are predicted from
    ``(z_i, beta)``, followed by a SiLU MLP.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        cond = cfg.latent_dim + cfg.n_shape
        self.segment_mlp = mlp(cond, cfg.segment_hidden, 1 + 6 + 3, cfg.segment_depth)
        h = cfg.decoder_hidden
        k = cfg.n_oscillators
        self.cond_in = nn.Linear(cond, h)
        self.osc_gain = nn.Linear(cond, k)
        self.osc_phase = nn.Linear(cond, k)
        self.osc_freq = nn.Parameter(torch.linspace(0.5, cfg.max_frequency, k) * math.pi)
        with torch.no_grad():
            self.osc_gain.weight.mul_(0.1)
            self.osc_gain.bias.fill_(1.0)
        self.time_in = nn.Linear(k + 1, h)
        self.motion_mlp = nn.Sequential(nn.SiLU(), mlp(h, h, cfg.n_joints * 6 + 3, cfg.decoder_depth - 1))
        self.register_buffer("identity", torch.tensor(IDENTITY_6D), persistent=False)

    def segment_params(self, z, beta):
        """``(delta_raw, rho)`` per primitive; ``z`` is ``(..., m, D)``."""
        beta = beta.unsqueeze(-2).expand(*z.shape[:-1], beta.shape[-1])
        out = self.segment_mlp(torch.cat([z, beta], dim=-1))
        rho = RigidTransform(out[..., 1:7] + self.identity.to(z.dtype), out[..., 7:10])
        return out[..., 0], rho

    def primitive_motion(self, z, beta, s):
        """Segment-local motion before the rigid transform.

        ``z`` ``(..., m, D)``, ``s`` ``(..., m, n)`` segment-local times.
        Returns ``theta`` ``(..., m, n, J, 6)`` and ``gamma`` ``(..., m, n, 3)``.
        """
        beta = beta.unsqueeze(-2).expand(*z.shape[:-1], beta.shape[-1])
        c = torch.cat([z, beta], dim=-1)
        gain = self.osc_gain(c).unsqueeze(-2)
        phase = self.osc_phase(c).unsqueeze(-2)
        osc = torch.sin(s.unsqueeze(-1) * self.osc_freq * gain + phase)
        h = self.cond_in(c).unsqueeze(-2) + self.time_in(torch.cat([osc, s.unsqueeze(-1)], dim=-1))
        out = self.motion_mlp(h)
        J = self.cfg.n_joints
        theta = out[..., : J * 6].unflatten(-1, (J, 6)) + self.identity.to(z.dtype)
        return theta, out[..., J * 6:]

    def forward(self, z, beta, tau):
        """Decode latents ``(B, m, D)`` with shapes ``(B, S)`` at normalized
        times ``(B, n)``."""
        delta_raw, rho = self.segment_params(z, beta)
        seg_layout = layout(delta_raw, rho, fixed=self.cfg.fixed_delta)
        s = (tau.unsqueeze(-2) - seg_layout.Delta.unsqueeze(-1)) / seg_layout.delta.unsqueeze(-1)
        theta_local, gamma_local = self.primitive_motion(z, beta, s)
        seg_theta, seg_gamma = transform_segments(theta_local, gamma_local, rho)
        theta, gamma, masks = combine(seg_theta, seg_gamma, seg_layout, tau, check=False)
        return DecoderOutput(theta, gamma, seg_theta, seg_gamma, masks, seg_layout)


def check_normalized_time(tau, tol=1e-6):
    if bool((tau < -tol).any()) or bool((tau > 1 + tol).any()):
        raise UnnormalizedInput("timestamps must be normalized to [0, 1]")


class MotionPriorModel(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = MotionEncoder(self.cfg)
        self.decoder = PrimitiveDecoder(self.cfg)

    def encode(self, theta, gamma, tau, padding_mask=None):
        check_normalized_time(tau)
        return self.encoder(theta, gamma, tau, padding_mask)

    def decode(self, z, beta, tau):
        return self.decoder(z, beta, tau)

    def forward(self, theta, gamma, tau, beta, noise=None):
        dist = self.encode(theta, gamma, tau)
        z = dist.mu if noise is None else sample(dist, noise)
        return dist, self.decode(z, beta, tau)


def save_checkpoint(path, prior, extra_modules=None, metadata=None, skeleton=None):
    """Write ``<path>`` (torch weight blob) and ``<path>.json`` (sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"prior": prior.state_dict()}
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": prior.cfg.to_dict(),
        "config_hash": prior.cfg.hash(),
        "normalization": NORMALIZATION_CONVENTION,
    }
    for name, module in (extra_modules or {}).items():
        blob[name] = module.state_dict()
        sidecar[f"{name}_config"] = module.cfg.to_dict()
    if skeleton is not None:
        sidecar["skeleton"] = skeleton.to_dict()
    if metadata:
        sidecar["metadata"] = metadata
    torch.save(blob, path)
    with open(sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(prior, sidecar, blob)``; rejects other format versions."""
    with open(sidecar_path(path)) as f:
        sidecar = json.load(f)
    version = sidecar.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionMismatch(
            f"checkpoint format {version!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig.from_dict(sidecar["model_config"])
    blob = torch.load(path, map_location="cpu", weights_only=True)
    prior = MotionPriorModel(cfg).to(dtype)
    prior.load_state_dict(blob["prior"])
    prior.eval()
    return prior, sidecar, blob
