"""Frame sequences, resampling and per-sequence normalization."""

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import LengthMismatch
from .rotation import blend_rot6d, matrix_to_rot6d, rot6d_to_matrix

CONSTANT_AXIS_EPS = 1e-9


@dataclass
class FrameSequence:
    """A motion sample: timestamps (s), local 6D joint rotations, root
    displacement (m) and one body shape."""

    timestamps: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    skeleton_ref: str = "default"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        n = len(self.timestamps)
        if n < 2:
            raise ValueError("a frame sequence needs at least 2 frames")
        if self.theta.ndim != 3 or self.theta.shape[0] != n or self.theta.shape[2] != 6:
            raise LengthMismatch(f"theta must be ({n}, J, 6), got {self.theta.shape}")
        if self.gamma.shape != (n, 3):
            raise LengthMismatch(f"gamma must be ({n}, 3), got {self.gamma.shape}")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_frames(self):
        return len(self.timestamps)

    @property
    def n_joints(self):
        return self.theta.shape[1]

    @property
    def duration(self):
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def fps(self):
        return (self.n_frames - 1) / self.duration

    def window(self, start, end):
        """Frames with ``start <= t <= end`` (no interpolation)."""
        keep = (self.timestamps >= start - 1e-9) & (self.timestamps <= end + 1e-9)
        return replace(
            self,
            timestamps=self.timestamps[keep],
            theta=self.theta[keep],
            gamma=self.gamma[keep],
            meta=dict(self.meta),
        )

    def resample(self, timestamps):
        """Interpolate at new times inside the sequence span.

        Displacements are interpolated linearly; rotations are blended in 6D
        between the two neighbouring frames and projected back onto valid
        rotations.
        """
        t = np.asarray(timestamps, dtype=np.float64)
        src = self.timestamps
        if t.min() < src[0] - 1e-9 or t.max() > src[-1] + 1e-9:
            raise ValueError("resample times fall outside the sequence span")
        t = np.clip(t, src[0], src[-1])
        hi = np.clip(np.searchsorted(src, t, side="right"), 1, len(src) - 1)
        lo = hi - 1
        w = (t - src[lo]) / (src[hi] - src[lo])
        gamma = (1 - w)[:, None] * self.gamma[lo] + w[:, None] * self.gamma[hi]
        weights = torch.as_tensor(np.stack([1 - w, w], axis=-1))[:, None, :]
        rots = torch.as_tensor(np.stack([self.theta[lo], self.theta[hi]], axis=2))
        blended = blend_rot6d(weights.expand(-1, self.n_joints, -1), rots)
        theta = matrix_to_rot6d(rot6d_to_matrix(blended), check=False).numpy()
        return replace(self, timestamps=t, theta=theta, gamma=gamma, meta=dict(self.meta))


@dataclass(frozen=True)
class NormalizationInfo:
    """Affine maps taking displacements to [-1, 1] per axis and time to [0, 1]."""

    gamma_min: tuple
    gamma_max: tuple
    tau_start: float
    tau_end: float

    @property
    def constant_axes(self):
        return tuple(
            bool(hi - lo <= CONSTANT_AXIS_EPS) for lo, hi in zip(self.gamma_min, self.gamma_max)
        )

    @property
    def gamma_center(self):
        return np.array([(lo + hi) / 2 for lo, hi in zip(self.gamma_min, self.gamma_max)])

    @property
    def gamma_scale(self):
        """Half ranges; zero on constant axes."""
        half = (np.asarray(self.gamma_max) - np.asarray(self.gamma_min)) / 2
        half[list(self.constant_axes)] = 0.0
        return half

    def normalize_gamma(self, gamma):
        gamma = np.asarray(gamma, dtype=np.float64)
        scale = self.gamma_scale
        safe = np.where(scale > 0, scale, 1.0)
        return np.where(scale > 0, (gamma - self.gamma_center) / safe, 0.0)

    def denormalize_gamma(self, gamma_n):
        # constant axes: scale 0 and center == min, so they map back exactly
        lo = np.asarray(self.gamma_min)
        hi = np.asarray(self.gamma_max)
        g = (np.asarray(gamma_n, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo
        return np.where(self.constant_axes, lo, g)

    def normalize_time(self, t):
        return (np.asarray(t, dtype=np.float64) - self.tau_start) / (self.tau_end - self.tau_start)

    def denormalize_time(self, tau):
        return np.asarray(tau, dtype=np.float64) * (self.tau_end - self.tau_start) + self.tau_start

    def to_dict(self):
        return {
            "gamma_min": list(self.gamma_min),
            "gamma_max": list(self.gamma_max),
            "tau_start": self.tau_start,
            "tau_end": self.tau_end,
            "constant_axes": list(self.constant_axes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gamma_min"]), tuple(d["gamma_max"]), d["tau_start"], d["tau_end"])


def fit_normalization(gamma, timestamps):
    gamma = np.asarray(gamma, dtype=np.float64)
    t = np.asarray(timestamps, dtype=np.float64)
    return NormalizationInfo(
        tuple(gamma.min(0).tolist()), tuple(gamma.max(0).tolist()), float(t[0]), float(t[-1])
    )


def normalize(seq):
    """Per-sequence normalization; returns ``(normalized_seq, info)``.

    Constant displacement axes map to 0 and are flagged in
    ``info.constant_axes``.
    """
    info = fit_normalization(seq.gamma, seq.timestamps)
    return (
        replace(
            seq,
            timestamps=info.normalize_time(seq.timestamps),
            gamma=info.normalize_gamma(seq.gamma),
            meta=dict(seq.meta),
        ),
        info,
    )


def denormalize(seq, info):
    return replace(
        seq,
        timestamps=info.denormalize_time(seq.timestamps),
        gamma=info.denormalize_gamma(seq.gamma),
        meta=dict(seq.meta),
    )
