"""Motion and point-cloud sequence files.

Motion file (JSON)::

    {"format_version": 1, "skeleton_ref": "default" | "<path to skeleton json>",
     "units": {"time": "s", "length": "m"}, "beta": [8 numbers],
     "frames": [{"t": 0.0, "theta": [[6 numbers] x J], "gamma": [x, y, z]}, ...],
     "provenance": {...optional...}}

``theta`` holds parent-relative joint rotations as the first two columns of
the rotation matrix. Externally licensed parametric motion (for example an
AMASS export) maps onto this schema by converting each joint's axis-angle to
a matrix, keeping its first two columns, dropping joints not present in the
referenced skeleton, copying the root translation into ``gamma`` and the
first 8 shape coefficients into ``beta``.

Point-cloud manifest (JSON)::

    {"format_version": 1, "units": "m", "timestamps": [...],
     "frames": [{"file": "frame_00000.bin", "format": "bin" | "txt", "points": k}, ...]}

``bin`` frames are raw little-endian float64 ``x y z`` triples; ``txt``
frames hold one ``x y z`` line per point. Paths are relative to the manifest.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import default_skeleton, load_skeleton
from .errors import EmptyCloud, ParseError, SchemaVersionMismatch
from .motion import FrameSequence

FORMAT_VERSION = 1


@dataclass
class PointCloudSequence:
    timestamps: np.ndarray
    clouds: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.clouds = [np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in self.clouds]
        if len(self.clouds) != len(self.timestamps):
            raise ParseError("one point cloud per timestamp is required")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for i, c in enumerate(self.clouds):
            if len(c) == 0:
                raise EmptyCloud(f"frame {i} has no points")

    @property
    def n_frames(self):
        return len(self.timestamps)

    @property
    def duration(self):
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def fps(self):
        return (self.n_frames - 1) / self.duration if self.n_frames > 1 else float("inf")

    @property
    def min_points(self):
        return min(len(c) for c in self.clouds)


def _require(d, key, where):
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    return d[key]


def _resolve_skeleton(ref, base):
    if ref in (None, "default"):
        return default_skeleton()
    path = Path(ref)
    if not path.is_absolute():
        path = Path(base).parent / path
    return load_skeleton(path)


def motion_to_dict(seq, provenance=None):
    d = {
        "format_version": FORMAT_VERSION,
        "skeleton_ref": seq.skeleton_ref,
        "units": {"time": "s", "length": "m"},
        "beta": seq.beta.tolist(),
        "frames": [
            {"t": float(t), "theta": th.tolist(), "gamma": g.tolist()}
            for t, th, g in zip(seq.timestamps, seq.theta, seq.gamma)
        ],
    }
    if provenance:
        d["provenance"] = provenance
    return d


def save_motion(seq, path, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(motion_to_dict(seq, provenance), f)
    return path


def load_motion(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    version = _require(d, "format_version", str(path))
    if version != FORMAT_VERSION:
        raise SchemaVersionMismatch(f"{path}: motion format {version!r}, expected {FORMAT_VERSION}")
    beta = _require(d, "beta", str(path))
    frames = _require(d, "frames", str(path))
    ref = d.get("skeleton_ref", "default")
    skel = _resolve_skeleton(ref, path)
    t, theta, gamma = [], [], []
    for i, fr in enumerate(frames):
        where = f"{path}: frames[{i}]"
        t.append(_require(fr, "t", where))
        th = np.asarray(_require(fr, "theta", where), dtype=np.float64)
        g = np.asarray(_require(fr, "gamma", where), dtype=np.float64)
        if th.ndim != 2 or th.shape[1] != 6:
            raise ParseError(f"{where}: field 'theta' must be J x 6, got shape {th.shape}")
        if th.shape[0] != skel.n_joints:
            raise SchemaVersionMismatch(
                f"{where}: {th.shape[0]} joints but skeleton {ref!r} has {skel.n_joints}"
            )
        if g.shape != (3,):
            raise ParseError(f"{where}: field 'gamma' must have 3 numbers")
        theta.append(th)
        gamma.append(g)
    try:
        return FrameSequence(np.array(t), np.stack(theta), np.stack(gamma), np.asarray(beta),
                             skeleton_ref=ref, meta={"provenance": d.get("provenance")})
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e


def save_point_clouds(pcs, path, fmt="bin", provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    frames = []
    for i, cloud in enumerate(pcs.clouds):
        name = f"{stem}_{i:05d}.{'bin' if fmt == 'bin' else 'xyz'}"
        target = path.parent / name
        if fmt == "bin":
            cloud.astype("<f8").tofile(target)
        else:
            np.savetxt(target, cloud, fmt="%.17g")
        frames.append({"file": name, "format": fmt, "points": len(cloud)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "units": "m",
        "timestamps": pcs.timestamps.tolist(),
        "frames": frames,
    }
    if provenance:
        manifest["provenance"] = provenance
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def load_point_clouds(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    version = _require(d, "format_version", str(path))
    if version != FORMAT_VERSION:
        raise SchemaVersionMismatch(f"{path}: manifest format {version!r}, expected {FORMAT_VERSION}")
    timestamps = _require(d, "timestamps", str(path))
    frames = _require(d, "frames", str(path))
    scale = {"m": 1.0, "mm": 1e-3}.get(d.get("units", "m"))
    if scale is None:
        raise ParseError(f"{path}: unsupported units {d.get('units')!r}")
    clouds = []
    for i, fr in enumerate(frames):
        where = f"{path}: frames[{i}]"
        target = path.parent / _require(fr, "file", where)
        fmt = fr.get("format", "bin")
        if fmt == "bin":
            data = np.fromfile(target, dtype="<f8")
        elif fmt == "txt":
            data = np.loadtxt(target, dtype=np.float64, ndmin=2)
        else:
            raise ParseError(f"{where}: unknown frame format {fmt!r}")
        if data.size % 3:
            raise ParseError(f"{where}: {target.name} does not hold xyz triples")
        clouds.append(data.reshape(-1, 3) * scale)
    return PointCloudSequence(np.asarray(timestamps), clouds)
