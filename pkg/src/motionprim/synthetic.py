"""Procedural motions for the default 20-joint skeleton.

Each kind is a periodic joint program built from elementary axis rotations
in the parent frame. Amplitude, frequency, phase, start heading and start
position are drawn from the MotionSpec seed, so a MotionSpec fully determines its
sequence. Walking kinds move the root along the facing direction at a speed
tied to their stride frequency.

Nominal parameters (before the seeded +/-15% amplitude and +/-10% frequency
jitter):

=============  =========  ===========  ============================
kind           freq (Hz)  speed (m/s)  main joint amplitudes (rad)
=============  =========  ===========  ============================
walk_line      0.9        1.4 * f      hip 0.45, knee 0.9, arm 0.35
walk_circle    0.9        1.4 * f      same as walk_line, turn 2.5-3.5 m radius
run_arc        1.4        2.1 * f      hip 0.7, knee 1.4, arm 0.6
wave_arm       1.2        0            shoulder 0.25, elbow 0.5
squat          0.4        0            hip 1.3, knee 2.0
idle           -          0            constant pose
=============  =========  ===========  ============================
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .body import default_skeleton, shaped_offsets
from .errors import InsufficientDiversity
from .motion import FrameSequence

KINDS = ("walk_line", "walk_circle", "run_arc", "wave_arm", "squat", "idle")
BLEND_WINDOW = 1.0

(PELVIS, L_HIP, R_HIP, SPINE1, L_KNEE, R_KNEE, SPINE2, L_ANKLE, R_ANKLE, SPINE3,
 NECK, L_COLLAR, R_COLLAR, HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW,
 L_WRIST, R_WRIST) = range(20)

ARM_DOWN = 1.25


@dataclass(frozen=True)
class MotionSpec:
    kind: str
    duration: float
    fps: float = 30.0
    shape: tuple = (0.0,) * 8
    seed: int = 0
    components: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS + ("composite",):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.duration <= 0 or self.fps <= 0:
            raise ValueError("duration and fps must be positive")
        if self.kind == "composite":
            if len(self.components) < 2 or any(c not in KINDS for c in self.components):
                raise ValueError("composite motions need >= 2 base kinds")
        object.__setattr__(self, "shape", tuple(float(b) for b in self.shape))
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def base_kinds(self):
        return set(self.components) if self.kind == "composite" else {self.kind}

    def to_dict(self):
        d = {"kind": self.kind, "duration": self.duration, "fps": self.fps,
             "shape": list(self.shape), "seed": self.seed}
        if self.components:
            d["components"] = list(self.components)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d["duration"]), float(d.get("fps", 30.0)),
                   tuple(d.get("shape", (0.0,) * 8)), int(d.get("seed", 0)),
                   tuple(d.get("components", ())))


def _rot(axis, angle):
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(angle), np.zeros_like(angle)
    if axis == "x":
        m = [o, z, z, z, c, -s, z, s, c]
    elif axis == "y":
        m = [c, z, s, z, o, z, -s, z, c]
    else:
        m = [c, -s, z, s, c, z, z, z, o]
    return np.stack(m, axis=-1).reshape(*angle.shape, 3, 3)


def _forward(heading):
    return np.stack([np.sin(heading), np.zeros_like(heading), np.cos(heading)], axis=-1)


def _lateral(heading):
    return np.stack([np.cos(heading), np.zeros_like(heading), -np.sin(heading)], axis=-1)


class _Program:
    """A seeded joint program evaluated at local times ``u`` (seconds)."""

    def __init__(self, kind, rng, leg):
        self.kind = kind
        self.leg = leg
        self.amp = rng.uniform(0.85, 1.15)
        self.freq_scale = rng.uniform(0.9, 1.1)
        self.phase0 = rng.uniform(0, 2 * np.pi)
        self.posture = rng.normal(0, 0.05, size=(20, 3))
        self.radius = rng.uniform(2.5, 3.5)
        self.turn = rng.choice([-1.0, 1.0])
        base = {"walk_line": 0.9, "walk_circle": 0.9, "run_arc": 1.4,
                "wave_arm": 1.2, "squat": 0.4, "idle": 0.0}[kind]
        self.freq = base * self.freq_scale
        stride = {"walk_line": 1.4, "walk_circle": 1.4, "run_arc": 2.1}.get(kind, 0.0)
        self.speed = stride * self.freq
        self.start_heading = 0.0
        self.start_pos = np.zeros(3)

    def phase(self, u):
        return 2 * np.pi * self.freq * u + self.phase0

    def heading(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "walk_circle":
            return self.start_heading + self.turn * self.speed / self.radius * u
        if self.kind == "run_arc":
            return self.start_heading + self.turn * 0.25 * u
        return self.start_heading + 0.0 * u

    def ground_track(self, u):
        """Horizontal root position; its time derivative is speed * forward."""
        u = np.asarray(u, dtype=np.float64)
        h0 = self.start_heading
        if self.kind in ("walk_circle", "run_arc"):
            omega = self.turn * (self.speed / self.radius if self.kind == "walk_circle" else 0.25)
            R = self.speed / omega
            h = self.heading(u)
            rel = R * np.stack([-np.cos(h) + np.cos(h0), 0 * u, np.sin(h) - np.sin(h0)], axis=-1)
            return self.start_pos + rel
        return self.start_pos + self.speed * u[..., None] * _forward(np.full_like(u, h0))

    def local_rotations(self, u):
        """``(T, 20, 3, 3)`` parent-relative rotations, root excluding heading."""
        u = np.asarray(u, dtype=np.float64)
        T = len(u)
        R = np.broadcast_to(np.eye(3), (T, 20, 3, 3)).copy()
        for j in range(20):
            p = self.posture[j]
            R[:, j] = _rot("x", p[0]) @ _rot("y", p[1]) @ _rot("z", p[2])
        phi = self.phase(u)
        a = self.amp
        l_arm = _rot("z", -ARM_DOWN + 0 * u)
        r_arm = _rot("z", ARM_DOWN + 0 * u)
        if self.kind in ("walk_line", "walk_circle", "run_arc"):
            run = self.kind == "run_arc"
            hip, knee, arm = (0.7, 1.4, 0.6) if run else (0.45, 0.9, 0.35)
            elbow = 1.3 if run else 0.3
            R[:, L_HIP] = _rot("x", -a * hip * np.sin(phi))
            R[:, R_HIP] = _rot("x", a * hip * np.sin(phi))
            R[:, L_KNEE] = _rot("x", a * knee * 0.5 * (1 - np.cos(phi - 0.6)))
            R[:, R_KNEE] = _rot("x", a * knee * 0.5 * (1 - np.cos(phi + np.pi - 0.6)))
            R[:, L_ANKLE] = _rot("x", 0.2 * a * np.sin(phi + 0.4))
            R[:, R_ANKLE] = _rot("x", -0.2 * a * np.sin(phi + 0.4))
            R[:, SPINE1] = _rot("y", 0.1 * a * np.sin(phi))
            R[:, L_SHOULDER] = _rot("x", a * arm * np.sin(phi)) @ l_arm
            R[:, R_SHOULDER] = _rot("x", -a * arm * np.sin(phi)) @ r_arm
            R[:, L_ELBOW] = _rot("y", -elbow - 0.2 * a * (1 + np.sin(phi)))
            R[:, R_ELBOW] = _rot("y", elbow + 0.2 * a * (1 - np.sin(phi)))
        elif self.kind == "wave_arm":
            R[:, SPINE2] = _rot("z", 0.06 * a * np.sin(phi / 2))
            R[:, L_SHOULDER] = l_arm
            R[:, R_SHOULDER] = _rot("z", -1.0 + 0.25 * a * np.sin(phi))
            R[:, R_ELBOW] = _rot("z", -0.5 - 0.5 * a * np.sin(phi + 0.5))
            R[:, R_WRIST] = _rot("z", -0.3 * a * np.sin(phi + 1.0))
            R[:, HEAD] = _rot("y", -0.2 + 0 * u)
        elif self.kind == "squat":
            d = self.squat_depth(u)
            R[:, L_HIP] = _rot("x", -1.3 * d)
            R[:, R_HIP] = _rot("x", -1.3 * d)
            R[:, L_KNEE] = _rot("x", 2.0 * d)
            R[:, R_KNEE] = _rot("x", 2.0 * d)
            R[:, SPINE1] = _rot("x", 0.4 * d)
            R[:, L_SHOULDER] = _rot("x", -1.3 * d) @ l_arm
            R[:, R_SHOULDER] = _rot("x", -1.3 * d) @ r_arm
        else:
            R[:, L_SHOULDER] = R[:, L_SHOULDER] @ l_arm
            R[:, R_SHOULDER] = R[:, R_SHOULDER] @ r_arm
        return R

    def squat_depth(self, u):
        return 0.5 * self.amp / 1.15 * (1 - np.cos(self.phase(u) - self.phase0))

    def height(self, u):
        hip_drop, thigh, shin = self.leg
        u = np.asarray(u, dtype=np.float64)
        phi = self.phase(u)
        if self.kind == "squat":
            d = self.squat_depth(u)
            return hip_drop + thigh * np.cos(1.3 * d) + shin * np.cos(0.7 * d)
        bob = {"walk_line": 0.02, "walk_circle": 0.02, "run_arc": 0.04}.get(self.kind, 0.0)
        return hip_drop + thigh + shin - bob * (1 - np.cos(2 * phi)) / 2

    def sway(self, u):
        amp = {"walk_line": 0.02, "walk_circle": 0.02, "run_arc": 0.03, "wave_arm": 0.01}.get(self.kind, 0.0)
        return amp * np.sin(self.phase(np.asarray(u, dtype=np.float64)))

    def evaluate(self, u):
        u = np.asarray(u, dtype=np.float64)
        h = self.heading(u)
        R = self.local_rotations(u)
        R[:, PELVIS] = _rot("y", h) @ R[:, PELVIS]
        if self.kind != "idle":
            R[:, PELVIS] = R[:, PELVIS] @ _rot("y", 0.08 * self.amp * np.sin(self.phase(u)))
        gamma = self.ground_track(u) + self.sway(u)[:, None] * _lateral(h)
        gamma[:, 1] = self.height(u)
        return R, gamma

    def end_state(self, u_end):
        u = np.array([u_end])
        return float(self.heading(u)[0]), self.ground_track(u)[0]


def _leg_lengths(beta):
    skel = default_skeleton()
    off = shaped_offsets(skel, np.asarray(beta, dtype=np.float64)).numpy()
    return (-off[L_HIP, 1], -off[L_KNEE, 1], -off[L_ANKLE, 1])


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _to_6d(R):
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _orthonormalize(r6):
    a, b = r6[..., :3], r6[..., 3:]
    c1 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - (c1 * b).sum(-1, keepdims=True) * c1
    c2 = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.concatenate([c1, c2], axis=-1)


def generate(spec, skel=None):
    """Render ``spec`` to a :class:`FrameSequence` at ``spec.fps``."""
    skel = skel or default_skeleton()
    if skel.n_joints != 20 or skel.names != default_skeleton().names:
        raise ValueError("the synthetic generator only drives the default 20-joint skeleton")
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.fps)) + 1
    t = np.arange(n) / spec.fps
    leg = _leg_lengths(spec.shape)
    start_heading = rng.uniform(0, 2 * np.pi)
    start_pos = np.array([rng.uniform(-1, 1), 0.0, rng.uniform(-1, 1)])

    kinds = spec.components if spec.kind == "composite" else (spec.kind,)
    bounds = np.linspace(0.0, spec.duration, len(kinds) + 1)
    programs = []
    for k, kind in enumerate(kinds):
        prog = _Program(kind, rng, leg)
        if programs:
            start_heading, start_pos = programs[-1].end_state(bounds[k] - bounds[k - 1])
        prog.start_heading, prog.start_pos = start_heading, np.array(start_pos)
        programs.append(prog)

    window = min(BLEND_WINDOW, 0.5 * (bounds[1] - bounds[0]))
    theta = None
    gamma = None
    for k, prog in enumerate(programs):
        R, g = prog.evaluate(t - bounds[k])
        r6 = _to_6d(R)
        if theta is None:
            theta, gamma = r6, g
            continue
        # cross-blend the previous result into this program around the boundary
        w = _smoothstep((t - (bounds[k] - window / 2)) / window)
        theta = (1 - w)[:, None, None] * theta + w[:, None, None] * r6
        gamma = (1 - w)[:, None] * gamma + w[:, None] * g
    theta = _orthonormalize(theta)
    return FrameSequence(
        t, theta, gamma, np.asarray(spec.shape, dtype=np.float64),
        meta={"spec": spec.to_dict()},
    )


def random_shapes(n, rng, scale=1.0):
    return [tuple(np.round(rng.uniform(-scale, scale, size=8), 3)) for _ in range(n)]


def make_specs(kinds, shapes, duration, fps=30.0, seed=0):
    """Cartesian product of kinds and shapes with distinct seeds."""
    specs = []
    for i, kind in enumerate(kinds):
        for j, shape in enumerate(shapes):
            s = seed * 100003 + i * 1009 + j
            if isinstance(kind, tuple):
                specs.append(MotionSpec("composite", duration, fps, shape, s, kind))
            else:
                specs.append(MotionSpec(kind, duration, fps, shape, s))
    return specs


def make_splits(specs, rng, n_kinds_out=None, n_shapes_out=None):
    """Hold out whole motion kinds and whole body shapes.

    Training keeps only specs using neither a held-out kind nor a held-out
    shape; everything else goes to validation.
    """
    rng = np.random.default_rng(rng)
    kinds = sorted(set().union(*(s.base_kinds for s in specs))) if specs else []
    shapes = sorted({s.shape for s in specs})
    if len(kinds) < 2 or len(shapes) < 2:
        raise InsufficientDiversity(
            f"need >= 2 motion kinds and >= 2 shapes, got {len(kinds)} and {len(shapes)}"
        )
    n_kinds_out = n_kinds_out or max(1, len(kinds) // 6)
    n_shapes_out = n_shapes_out or max(1, len(shapes) // 4)
    held_kinds = {kinds[i] for i in rng.choice(len(kinds), n_kinds_out, replace=False)}
    held_shapes = {shapes[i] for i in rng.choice(len(shapes), n_shapes_out, replace=False)}
    train, val = [], []
    for s in specs:
        if s.base_kinds & held_kinds or s.shape in held_shapes:
            val.append(s)
        else:
            train.append(s)
    if not train:
        raise InsufficientDiversity("holding out kinds and shapes left no training data")
    return train, val


def with_duration(spec, duration):
    return replace(spec, duration=duration)
