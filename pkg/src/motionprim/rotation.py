"""Continuous 6D rotations, conversions, blending and rigid transforms.

A 6D rotation is the first two columns ``(a, b)`` of a rotation matrix,
stored as a flat ``(..., 6)`` tensor ``[a, b]``. Conversion back to a matrix
uses Gram-Schmidt, which is the only place orthonormalization happens.
"""

from typing import NamedTuple

import numpy as np
import torch

from .errors import DegenerateInput, EmptyInput, InvalidRotation, ZeroWeightSum

DEGENERATE_EPS = 1e-8
ROTATION_TOL = 1e-5

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def identity_6d(*shape, dtype=torch.float64, device=None):
    r = torch.tensor(IDENTITY_6D, dtype=dtype, device=device)
    return r.expand(*shape, 6).clone()


def rot6d_to_matrix(r, check=True):
    """Map ``(..., 6)`` vectors to ``(..., 3, 3)`` rotation matrices.

    Columns are ``c1 = a/|a|``, ``c2 = normalize(b - (c1.b) c1)`` and
    ``c3 = c1 x c2``. With ``check=True`` a (near) zero or collinear pair
    raises :class:`DegenerateInput`; otherwise norms are clamped so the
    function stays finite inside training loops.
    """
    r = as_tensor(r)
    if r.shape[-1] != 6:
        raise ValueError(f"expected last dimension 6, got {tuple(r.shape)}")
    a, b = r[..., :3], r[..., 3:]
    a_norm = a.norm(dim=-1, keepdim=True)
    if check and bool((a_norm < DEGENERATE_EPS).any()):
        raise DegenerateInput("first 6D column has (near) zero norm")
    c1 = a / a_norm.clamp_min(DEGENERATE_EPS)
    b_perp = b - (c1 * b).sum(-1, keepdim=True) * c1
    b_norm = b_perp.norm(dim=-1, keepdim=True)
    if check and bool((b_norm < DEGENERATE_EPS).any()):
        raise DegenerateInput("6D columns are collinear or the second is zero")
    c2 = b_perp / b_norm.clamp_min(DEGENERATE_EPS)
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


def check_rotation_matrix(R, tol=ROTATION_TOL):
    R = as_tensor(R)
    eye = torch.eye(3, dtype=R.dtype, device=R.device)
    ortho_err = (R.transpose(-1, -2) @ R - eye).abs().amax() if R.numel() else 0.0
    det_err = (torch.linalg.det(R) - 1.0).abs().amax() if R.numel() else 0.0
    if ortho_err > tol or det_err > tol:
        raise InvalidRotation(
            f"not a rotation matrix (orthogonality error {float(ortho_err):.2e}, "
            f"determinant error {float(det_err):.2e})"
        )


def matrix_to_rot6d(R, check=True):
    """First two columns of ``R`` flattened to ``(..., 6)``."""
    R = as_tensor(R)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3), got {tuple(R.shape)}")
    if check:
        check_rotation_matrix(R)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def blend_rot6d(weights, rots, check=True):
    """Weighted mean of 6D vectors along the second-to-last axis of ``rots``.

    ``weights`` has shape ``(..., k)`` and ``rots`` ``(..., k, 6)``. The
    result is not re-orthonormalized.
    """
    weights = as_tensor(weights)
    rots = as_tensor(rots, dtype=weights.dtype)
    if weights.shape[-1] == 0 or rots.shape[-2] == 0:
        raise EmptyInput("blend_rot6d needs at least one rotation")
    if weights.shape[-1] != rots.shape[-2]:
        raise ValueError("weights and rotations differ in length")
    total = weights.sum(-1, keepdim=True)
    if check and bool((total <= 0).any()):
        raise ZeroWeightSum("rotation weights sum to zero")
    return (weights.unsqueeze(-1) * rots).sum(-2) / total


class RigidTransform(NamedTuple):
    """Rotation (6D) followed by translation; fields may carry batch dims."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, *shape, dtype=torch.float64):
        return cls(identity_6d(*shape, dtype=dtype), torch.zeros(*shape, 3, dtype=dtype))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_rot6d(R), as_tensor(t))

    def matrix(self, check=True):
        return rot6d_to_matrix(self.rotation, check=check)

    def compose(self, first):
        """``self`` after ``first``."""
        R2 = self.matrix()
        R = R2 @ first.matrix()
        t = (R2 @ as_tensor(first.translation).unsqueeze(-1)).squeeze(-1) + self.translation
        return RigidTransform(matrix_to_rot6d(R, check=False), t)


def apply_rigid(rho, theta_root, gamma, check=True):
    """Rotate the root joint rotation and rotate+translate the displacement.

    Returns ``(theta_root', gamma')`` with ``theta_root' = R_rho R_root`` in 6D
    and ``gamma' = R_rho gamma + t_rho``. All arguments broadcast.
    """
    R_rho = rot6d_to_matrix(rho.rotation, check=check)
    R_root = rot6d_to_matrix(theta_root, check=check)
    theta_out = matrix_to_rot6d(R_rho @ R_root, check=False)
    gamma = as_tensor(gamma, dtype=R_rho.dtype)
    gamma_out = (R_rho @ gamma.unsqueeze(-1)).squeeze(-1) + as_tensor(rho.translation)
    return theta_out, gamma_out


def axis_angle_to_matrix(axis_angle):
    """Rodrigues formula; used by the synthetic generator and tests."""
    v = as_tensor(axis_angle)
    angle = v.norm(dim=-1, keepdim=True)
    axis = v / angle.clamp_min(1e-12)
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*v.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=v.dtype).expand_as(K)
    s = torch.sin(angle).unsqueeze(-1)
    c = torch.cos(angle).unsqueeze(-1)
    return eye + s * K + (1 - c) * (K @ K)
