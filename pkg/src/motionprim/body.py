"""Simplified parametric kinematic body.

Stands in for a mesh body model ``M(theta, gamma, beta)``: a joint tree with
shape-dependent bone lengths, forward kinematics, and a deterministic
capsule-shell point sampling used wherever mesh vertices would be.

Anything exposing ``joints(theta, gamma, beta)`` and
``surface(theta, gamma, beta)`` (see :class:`BodyModel`) can replace
:class:`KinematicBody`, e.g. an adapter around a licensed mesh model.
"""

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import numpy as np
import torch

from .errors import LengthMismatch, ParseError
from .rotation import as_tensor, rot6d_to_matrix

N_SHAPE = 8
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class Skeleton:
    parents: tuple
    rest_offsets: np.ndarray
    shape_sensitivity: np.ndarray
    names: tuple
    radii: np.ndarray = field(default=None)

    def __post_init__(self):
        J = len(self.parents)
        offsets = np.array(self.rest_offsets, dtype=np.float64)
        sens = np.array(self.shape_sensitivity, dtype=np.float64)
        if offsets.shape != (J, 3):
            raise ParseError(f"rest_offsets must be {J}x3, got {offsets.shape}")
        if sens.ndim != 2 or sens.shape[0] != J:
            raise ParseError(f"shape_sensitivity must have {J} rows, got {sens.shape}")
        if len(self.names) != J:
            raise ParseError(f"names must have {J} entries")
        if self.parents[0] != -1 or any(
            not (0 <= p < j) for j, p in enumerate(self.parents) if j > 0
        ):
            raise ParseError("parents must form a tree rooted at joint 0 with parent < child")
        if np.any(offsets[0] != 0):
            raise ParseError("root rest offset must be zero")
        radii = np.full(J, 0.05) if self.radii is None else np.array(self.radii, dtype=np.float64)
        if radii.shape != (J,):
            raise ParseError(f"radii must have {J} entries")
        for name, value in (
            ("parents", tuple(int(p) for p in self.parents)),
            ("names", tuple(self.names)),
            ("rest_offsets", offsets),
            ("shape_sensitivity", sens),
            ("radii", radii),
        ):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_shape(self):
        return self.shape_sensitivity.shape[1]

    def subset(self, n_joints):
        """First ``n_joints`` joints; used to build tiny test bodies."""
        return Skeleton(
            self.parents[:n_joints],
            self.rest_offsets[:n_joints],
            self.shape_sensitivity[:n_joints],
            self.names[:n_joints],
            self.radii[:n_joints],
        )

    def to_dict(self):
        return {
            "format_version": 1,
            "units": "metres",
            "names": list(self.names),
            "parents": list(self.parents),
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_sensitivity": self.shape_sensitivity.tolist(),
            "radii": self.radii.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("parents", "rest_offsets", "shape_sensitivity", "names") if k not in d]
        if missing:
            raise ParseError(f"skeleton is missing field(s): {', '.join(missing)}")
        return cls(
            tuple(d["parents"]),
            np.asarray(d["rest_offsets"], dtype=np.float64),
            np.asarray(d["shape_sensitivity"], dtype=np.float64),
            tuple(d["names"]),
            None if d.get("radii") is None else np.asarray(d["radii"], dtype=np.float64),
        )


def load_skeleton(path=None):
    """Read a skeleton JSON file; ``None`` loads the bundled 20-joint default."""
    if path is None:
        text = resources.files("motionprim").joinpath("data/skeleton_default.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"skeleton JSON line {e.lineno}: {e.msg}") from e
    return Skeleton.from_dict(d)


def save_skeleton(skel, path):
    with open(path, "w") as f:
        json.dump(skel.to_dict(), f, indent=2)


_DEFAULT = None


def default_skeleton():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_skeleton()
    return _DEFAULT


def shaped_offsets(skel, beta):
    """Bone vectors scaled by ``1 + sum_k beta_k s_jk``; shape ``(..., J, 3)``."""
    beta = as_tensor(beta)
    sens = torch.tensor(skel.shape_sensitivity, dtype=beta.dtype)
    rest = torch.tensor(skel.rest_offsets, dtype=beta.dtype)
    scale = 1.0 + beta[..., : sens.shape[1]] @ sens.T
    return rest * scale.unsqueeze(-1)


def forward_kinematics(theta, gamma, beta, skel, return_rotations=False):
    """Joint positions ``(..., J, 3)`` from local 6D rotations ``(..., J, 6)``.

    The root sits at ``gamma``; each child is placed at its parent's position
    plus the parent's global rotation applied to the shaped bone vector.
    """
    theta = as_tensor(theta)
    gamma = as_tensor(gamma, dtype=theta.dtype)
    beta = as_tensor(beta, dtype=theta.dtype)
    J = skel.n_joints
    if theta.shape[-2] != J:
        raise LengthMismatch(f"pose has {theta.shape[-2]} joints, skeleton has {J}")
    local = rot6d_to_matrix(theta, check=False)
    offsets = shaped_offsets(skel, beta)
    batch = torch.broadcast_shapes(theta.shape[:-2], gamma.shape[:-1], beta.shape[:-1])
    offsets = offsets.expand(*batch, J, 3)
    rots = [local[..., 0, :, :].expand(*batch, 3, 3)]
    pos = [gamma.expand(*batch, 3)]
    for j in range(1, J):
        p = skel.parents[j]
        pos.append(pos[p] + (rots[p] @ offsets[..., j, :].unsqueeze(-1)).squeeze(-1))
        rots.append(rots[p] @ local[..., j, :, :])
    positions = torch.stack(pos, dim=-2)
    if return_rotations:
        return positions, torch.stack(rots, dim=-3)
    return positions


def _shell_directions(skel, samples_per_bone):
    """Unit vectors perpendicular to each rest bone, ``(J-1, S, 3)``."""
    dirs = np.zeros((skel.n_joints - 1, samples_per_bone, 3))
    for j in range(1, skel.n_joints):
        axis = skel.rest_offsets[j] / np.linalg.norm(skel.rest_offsets[j])
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        angles = GOLDEN_ANGLE * np.arange(samples_per_bone) + 0.7 * j
        dirs[j - 1] = np.cos(angles)[:, None] * e1 + np.sin(angles)[:, None] * e2
    return dirs


def surface_points(theta, gamma, beta, skel, samples_per_bone=8):
    """Deterministic capsule-shell samples, ``(..., (J-1) * S, 3)``.

    Sample ``k`` of a bone sits at fraction ``(k + 0.5) / S`` along it,
    pushed out radially by the bone radius in the parent joint's frame.
    """
    if samples_per_bone < 1:
        raise ValueError("samples_per_bone must be >= 1")
    theta = as_tensor(theta)
    beta = as_tensor(beta, dtype=theta.dtype)
    positions, rots = forward_kinematics(theta, gamma, beta, skel, return_rotations=True)
    S = samples_per_bone
    children = list(range(1, skel.n_joints))
    parents = [skel.parents[j] for j in children]
    frac = (torch.arange(S, dtype=theta.dtype) + 0.5) / S
    radial = torch.as_tensor(
        _shell_directions(skel, S) * skel.radii[1:, None, None], dtype=theta.dtype
    )
    offsets = shaped_offsets(skel, beta)[..., children, :]
    local = frac[:, None] * offsets.unsqueeze(-2) + radial
    world = (rots[..., parents, :, :].unsqueeze(-3) @ local.unsqueeze(-1)).squeeze(-1)
    pts = positions[..., parents, :].unsqueeze(-2) + world
    return pts.flatten(-3, -2)


class BodyModel(Protocol):
    n_joints: int

    def joints(self, theta, gamma, beta): ...

    def surface(self, theta, gamma, beta): ...


class KinematicBody:
    """Default :class:`BodyModel` backed by a :class:`Skeleton`."""

    def __init__(self, skeleton=None, samples_per_bone=8):
        self.skeleton = skeleton if skeleton is not None else default_skeleton()
        self.samples_per_bone = samples_per_bone

    @property
    def n_joints(self):
        return self.skeleton.n_joints

    def joints(self, theta, gamma, beta):
        return forward_kinematics(theta, gamma, beta, self.skeleton)

    def surface(self, theta, gamma, beta):
        return surface_points(theta, gamma, beta, self.skeleton, self.samples_per_bone)


def mpjpe(predicted, reference):
    """Mean per-joint position error in millimetres; inputs in metres."""
    a = np.asarray(predicted.detach().cpu() if torch.is_tensor(predicted) else predicted, dtype=np.float64)
    b = np.asarray(reference.detach().cpu() if torch.is_tensor(reference) else reference, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"sequence shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean() * 1000.0)
