"""Training objective terms. Every loss averages over leading batch dims."""

from dataclasses import dataclass

import torch

from .errors import LengthMismatch


@dataclass
class LossWeights:
    lambda_kl: float = 1e-4
    lambda_reg: float = 1e-2
    lambda_3d: float = 0.0
    lambda_prior: float = 1e-2

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_reg", "lambda_3d", "lambda_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def kl_loss(mu, log_sigma):
    """Mean over primitives of KL(N(mu, sigma) || N(0, I)), summed over dims.

    ``mu`` and ``log_sigma`` are ``(..., m, D)``.
    """
    kl = 0.5 * (mu**2 + torch.exp(2 * log_sigma) - 1.0 - 2.0 * log_sigma).sum(-1)
    return kl.mean()


def duration_reg(delta):
    """``sum_j (delta_j - 1/m)^2`` over the last axis."""
    m = delta.shape[-1]
    return ((delta - 1.0 / m) ** 2).sum(-1).mean()


def _check_frames(a, b, what):
    if a.shape != b.shape:
        raise LengthMismatch(f"{what}: predicted {tuple(a.shape)} vs reference {tuple(b.shape)}")


def point_term(pred_points, gt_points):
    """Per-frame mean squared point distance, averaged over frames."""
    _check_frames(pred_points, gt_points, "surface points")
    return ((pred_points - gt_points) ** 2).sum(-1).mean()


def global_rec_loss(theta, gamma, gt_theta, gt_gamma, lambda_3d=0.0, pred_points=None, gt_points=None):
    """Frame-averaged squared error on 6D rotations and displacement plus an
    optional weighted surface-point term.

    Shapes are ``(..., n, J, 6)`` and ``(..., n, 3)``; points ``(..., n, P, 3)``.
    """
    _check_frames(theta, gt_theta, "rotations")
    _check_frames(gamma, gt_gamma, "displacements")
    loss = ((theta - gt_theta) ** 2).sum((-2, -1)).mean() + ((gamma - gt_gamma) ** 2).sum(-1).mean()
    if lambda_3d:
        loss = loss + lambda_3d * point_term(pred_points, gt_points)
    return loss


def segment_rec_loss(seg_theta, seg_gamma, masks, gt_theta, gt_gamma):
    """Mask-weighted per-segment reconstruction error.

    ``seg_theta`` ``(..., m, n, J, 6)`` and ``seg_gamma`` ``(..., m, n, 3)``
    already carry their rigid transforms; ``masks`` is ``(..., m, n)``. Both
    terms use the same mask value ``G_j(tau_i)``.
    """
    if seg_theta.shape[-3:] != gt_theta.shape[-3:] or seg_gamma.shape[-2:] != gt_gamma.shape[-2:]:
        raise LengthMismatch("segment outputs and reference differ in frames or joints")
    if masks.shape != seg_gamma.shape[:-1]:
        raise LengthMismatch("mask shape does not match segment outputs")
    err_theta = ((seg_theta - gt_theta.unsqueeze(-4)) ** 2).sum((-2, -1))
    err_gamma = ((seg_gamma - gt_gamma.unsqueeze(-3)) ** 2).sum(-1)
    per_seq = (masks * (err_theta + err_gamma)).mean((-2, -1))
    return per_seq.mean()


def total_loss(rec_global, rec_segment, kl, reg, weights=None):
    w = weights or LossWeights()
    return rec_global + rec_segment + w.lambda_kl * kl + w.lambda_reg * reg
